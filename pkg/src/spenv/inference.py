"""Asymptotic inference for the reduced-rank spatial regression.

Builds the per-site Fisher information of the unreduced model, the gradient
matrix of the reduced parameterization, and the resulting asymptotic
covariance of the estimators. Also provides the closed-form one-covariate
special case and the efficiency ratio against the unreduced estimator.
"""

from dataclasses import dataclass

import numpy as np

from .matalg import (commutation_matrix, contraction_matrix, expansion_matrix,
                     pinv, sym)
from .spatialcov import whiten


@dataclass(frozen=True)
class FisherInfo:
    """Per-site information, block diagonal in (vec(beta'), vech(V))."""

    j_beta: np.ndarray
    j_v: np.ndarray

    @property
    def full(self):
        rp = self.j_beta.shape[0]
        h = self.j_v.shape[0]
        out = np.zeros((rp + h, rp + h))
        out[:rp, :rp] = self.j_beta
        out[rp:, rp:] = self.j_v
        return out


def fisher_info(v, g, corr):
    """Fisher information per site for coefficients and covariance.

    The coefficient block is V^-1 (x) (G' rho^-1 G / n); the covariance block
    is E' (V^-1 (x) V^-1) E / 2 in half-vectorized coordinates.
    """
    v = sym(v)
    n = g.shape[0]
    r = v.shape[0]
    vinv = np.linalg.inv(v)
    wg = whiten(corr, g)
    gram = wg.T @ wg / n
    e = expansion_matrix(r)
    j_beta = np.kron(vinv, gram)
    j_v = 0.5 * e.T @ np.kron(vinv, vinv) @ e
    return FisherInfo(j_beta=sym(j_beta), j_v=sym(j_v))


def psi_matrix(params, p):
    """Gradient of (vec(beta'), vech(V)) in the reduced parameterization.

    Columns are ordered as (vec eta, vec Gamma1, vech Omega1, vech Omega0).
    The Gamma1 block of the covariance row is the constrained derivative in
    which the complement basis moves with Gamma1.
    """
    gamma1 = params.gamma1
    gamma0 = params.gamma0
    eta = params.eta
    omega1 = params.omega1
    omega0 = params.omega0
    r, u = gamma1.shape
    c = contraction_matrix(r)
    k_rp = commutation_matrix(r, p) if p else np.zeros((0, 0))
    h = r * (r + 1) // 2

    # row one: vec(beta') = K_rp vec(Gamma1 eta)
    b_eta = k_rp @ np.kron(np.eye(p), gamma1) if p else np.zeros((0, u * p))
    b_g = k_rp @ np.kron(eta.T, np.eye(r)) if p else np.zeros((0, r * u))
    # row two: vech(V)
    if u < r:
        v0 = gamma0 @ omega0 @ gamma0.T
    else:
        v0 = np.zeros((r, r))
    v_g = 2.0 * c @ (np.kron(gamma1 @ omega1, np.eye(r))
                     - np.kron(gamma1, v0))
    v_o1 = c @ np.kron(gamma1, gamma1) @ expansion_matrix(u)
    if u < r:
        v_o0 = c @ np.kron(gamma0, gamma0) @ expansion_matrix(r - u)
    else:
        v_o0 = np.zeros((h, 0))

    rp = r * p
    top = np.hstack([b_eta, b_g,
                     np.zeros((rp, v_o1.shape[1])),
                     np.zeros((rp, v_o0.shape[1]))])
    bottom = np.hstack([np.zeros((h, u * p)), v_g, v_o1, v_o0])
    return np.vstack([top, bottom])


@dataclass(frozen=True)
class InferenceReport:
    lam: np.ndarray  # asymptotic covariance without reduction
    lam0: np.ndarray  # asymptotic covariance under the reduced model
    avar_beta: np.ndarray  # coefficient block of lam0, for vec(beta')
    se_beta: np.ndarray  # r x p standard errors at the given sample size


def envelope_avar(info, params, p, n):
    """Asymptotic covariances of the unreduced and reduced estimators.

    lam is the inverse information; lam0 projects it through the gradient
    matrix, lam0 = Psi (Psi' J Psi)^+ Psi'. Standard errors divide by the
    sample size before the square root.
    """
    j = info.full
    lam = pinv(j)
    psi = psi_matrix(params, p)
    lam0 = sym(psi @ pinv(sym(psi.T @ j @ psi)) @ psi.T)
    rp = params.gamma1.shape[0] * p
    avb = lam0[:rp, :rp]
    r = params.gamma1.shape[0]
    if p:
        se = np.sqrt(np.maximum(np.diag(avb), 0.0) / n).reshape(r, p)
    else:
        se = np.zeros((r, 0))
    return InferenceReport(lam=lam, lam0=sym(lam0), avar_beta=sym(avb), se_beta=se)


def avar_beta(params, g, corr):
    """Closed-form asymptotic covariance of vec(beta') under the reduced model.

    First term: material variation, (G' rho^-1 G / n)^-1 (x) Gamma1 Omega1
    Gamma1'. Second term: subspace-estimation variation, expressed in the
    complement coordinates of the basis (perturbations Gamma0 A of Gamma1),
    where the information of those coordinates comes from the covariance rows
    of the gradient matrix.
    """
    gamma1, gamma0 = params.gamma1, params.gamma0
    eta, omega1 = params.eta, params.omega1
    r, u = gamma1.shape
    p = g.shape[1]
    n = g.shape[0]
    wg = whiten(corr, g)
    gram = wg.T @ wg / n
    k_rp = commutation_matrix(r, p)
    term1 = np.kron(np.linalg.inv(gram), sym(gamma1 @ omega1 @ gamma1.T))
    if u == r:
        return sym(k_rp @ term1 @ k_rp.T)

    v = params.v
    vinv = np.linalg.inv(v)
    e = expansion_matrix(r)
    j_v = 0.5 * e.T @ np.kron(vinv, vinv) @ e
    psi = psi_matrix(params, p)
    rp = r * p
    psi2 = psi[:, u * p:u * p + r * u]  # Gamma1 columns
    j_full = np.zeros((rp + j_v.shape[0],) * 2)
    j_full[:rp, :rp] = np.kron(vinv, gram)
    j_full[rp:, rp:] = j_v
    m = psi2.T @ j_full @ psi2
    red = np.kron(np.eye(u), gamma0)  # complement coordinates of vec(Gamma1)
    m_red = sym(red.T @ m @ red)
    term2 = np.kron(eta.T, gamma0) @ pinv(m_red) @ np.kron(eta, gamma0.T)
    return sym(k_rp @ (term1 + term2) @ k_rp.T)


def avar_beta_simplified(sigma1_sq, sigma0_sq, beta, gamma1, x, corr):
    """One-covariate closed form with spherical covariance parts.

    Requires p = 1 and Omega1 = sigma1^2 I, Omega0 = sigma0^2 I. Returns the
    r x r asymptotic covariance of the coefficient vector.
    """
    beta = np.asarray(beta, dtype=float).ravel()
    gamma1 = np.asarray(gamma1, dtype=float)
    r = gamma1.shape[0]
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    n = x.shape[0]
    wx = whiten(corr, x)
    xrx = float((wx * wx).sum())
    from .matalg import orth_complement

    gamma0 = orth_complement(gamma1)
    p1 = gamma1 @ gamma1.T
    p0 = gamma0 @ gamma0.T
    b2 = float(beta @ beta)
    term1 = (n * sigma1_sq / xrx) * p1
    denom = xrx * sigma1_sq * b2 + n * (sigma0_sq - sigma1_sq) ** 2
    term2 = (n * sigma0_sq * sigma1_sq * b2 / denom) * p0
    return sym(term1 + term2)


def variance_ratio(sigma1_sq, sigma0_sq, sigma_x_sq, beta, gamma1, x, corr):
    """Ratio of the reduced estimator's covariance with and without whitening.

    Identity matrix means whitening changes nothing; with the identity
    correlation the ratio is exactly the identity.
    """
    beta = np.asarray(beta, dtype=float).ravel()
    gamma1 = np.asarray(gamma1, dtype=float)
    r = gamma1.shape[0]
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    n = x.shape[0]
    wx = whiten(corr, x)
    xrx = float((wx * wx).sum())
    from .matalg import orth_complement

    gamma0 = orth_complement(gamma1)
    p0 = gamma0 @ gamma0.T
    b2 = float(beta @ beta)
    d2 = (sigma0_sq - sigma1_sq) ** 2
    coef = d2 * (n * sigma_x_sq / xrx - 1.0) / (d2 + sigma1_sq * sigma_x_sq * b2)
    return np.eye(r) + coef * p0
