"""Model-level quantities for multivariate regression with correlated sites.

Holds the dataset container, centering, generalized least squares under a
known site correlation, the whitened moment matrices that drive subspace
estimation, and the full and factored Gaussian log-likelihoods.
"""

from dataclasses import dataclass, field

import numpy as np

from .matalg import logdet0, pinv, sym
from .spatialcov import whiten

LOG_2PI = float(np.log(2.0 * np.pi))


class RankDeficientError(ValueError):
    """Raised when the covariate matrix has (numerically) collinear columns."""


@dataclass(frozen=True)
class SpatialDataset:
    """Observations Y and covariates X at planar sites.

    loc is n x 2, Y is n x r, X is n x p (p may be zero).
    """

    loc: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    response_names: tuple = ()
    covariate_names: tuple = ()

    def __post_init__(self):
        loc = np.asarray(self.loc, dtype=float)
        y = np.asarray(self.Y, dtype=float)
        x = np.asarray(self.X, dtype=float)
        if loc.ndim != 2 or loc.shape[1] != 2:
            raise ValueError(f"loc must be n x 2, got shape {loc.shape}")
        if y.ndim != 2:
            raise ValueError(f"Y must be a matrix, got shape {y.shape}")
        if x.ndim != 2:
            raise ValueError(f"X must be a matrix, got shape {x.shape}")
        n = loc.shape[0]
        if y.shape[0] != n or x.shape[0] != n:
            raise ValueError("loc, Y and X must have the same number of rows")
        if y.shape[1] < 1:
            raise ValueError("Y needs at least one response column")
        if n <= x.shape[1]:
            raise ValueError(f"need more sites ({n}) than covariates "
                             f"({x.shape[1]})")
        for bad in (np.isnan, np.isinf):
            if bad(loc).any() or bad(y).any() or bad(x).any():
                raise ValueError("data contain non-finite values")
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "Y", y)
        object.__setattr__(self, "X", x)

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def r(self):
        return self.Y.shape[1]

    @property
    def p(self):
        return self.X.shape[1]


@dataclass(frozen=True)
class CenteredData:
    """Column-centered responses H and covariates G with the removed means."""

    H: np.ndarray
    G: np.ndarray
    ybar: np.ndarray
    xbar: np.ndarray

    @property
    def n(self):
        return self.H.shape[0]


def center(ds):
    ybar = ds.Y.mean(axis=0)
    xbar = ds.X.mean(axis=0) if ds.p else np.zeros(0)
    return CenteredData(H=ds.Y - ybar, G=ds.X - xbar if ds.p else ds.X.copy(),
                        ybar=ybar, xbar=xbar)


def gls_beta(cd, corr):
    """Generalized least-squares coefficients, r x p, under a site correlation.

    Solves (G' rho^-1 G) b = G' rho^-1 H columnwise and returns b'. With the
    identity correlation this is ordinary least squares on centered data.
    """
    p = cd.G.shape[1]
    r = cd.H.shape[1]
    if p == 0:
        return np.zeros((r, 0))
    wg = whiten(corr, cd.G)
    wh = whiten(corr, cd.H)
    gram = wg.T @ wg
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise RankDeficientError(
            f"covariate cross-product is numerically singular (cond={cond:.3e})")
    return np.linalg.solve(gram, wg.T @ wh).T


@dataclass(frozen=True)
class MomentMatrices:
    """Whitened second-moment matrices of the responses.

    sigma_Y is the marginal moment H' rho^-1 H / n; sigma_res is the moment
    of the whitened responses after projecting out the whitened covariates.
    """

    sigma_Y: np.ndarray
    sigma_res: np.ndarray


def moments(cd, corr):
    n = cd.n
    wh = whiten(corr, cd.H)
    sigma_y = sym(wh.T @ wh / n)
    if cd.G.shape[1] == 0:
        return MomentMatrices(sigma_Y=sigma_y, sigma_res=sigma_y.copy())
    wg = whiten(corr, cd.G)
    gram = wg.T @ wg
    coefs = np.linalg.solve(gram, wg.T @ wh)
    resid = wh - wg @ coefs
    sigma_res = sym(resid.T @ resid / n)
    return MomentMatrices(sigma_Y=sigma_y, sigma_res=sigma_res)


def loglik_full(ds, alpha, beta, v, corr):
    """Gaussian log-likelihood of the full model with error covariance V x rho.

    The residual matrix is Y - 1 alpha' - X beta'; the correlation enters
    through its cached factorization. Includes the 2 pi normalizing constant.
    """
    n, r = ds.n, ds.r
    alpha = np.asarray(alpha, dtype=float).ravel()
    beta = np.asarray(beta, dtype=float)
    v = sym(v)
    resid = ds.Y - alpha
    if ds.p:
        resid = resid - ds.X @ beta.T
    sign, logdet_v = np.linalg.slogdet(v)
    if sign <= 0:
        raise ValueError("V must be positive definite")
    wr = whiten(corr, resid)
    quad = float(np.sum(wr * np.linalg.solve(v, wr.T).T))
    return (-0.5 * n * r * LOG_2PI - 0.5 * n * logdet_v
            - 0.5 * r * corr.log_det - 0.5 * quad)


def loglik_factored(ds, alpha, eta, gamma1, omega1, omega0, corr, gamma0=None):
    """The two factors of the envelope log-likelihood, as (material, immaterial).

    The material factor uses the rank-u covariance V1 = Gamma1 Omega1 Gamma1'
    and the regression residual; the immaterial factor uses the rank-(r-u)
    covariance V0 built on the orthogonal complement and the response centered
    only by alpha. Determinants are over nonzero eigenvalues and inverses are
    Moore-Penrose. Normalizing constants are split by rank so that the two
    factors sum exactly to the full log-likelihood at V = V0 + V1.

    omega0 must be expressed in the basis gamma0; when gamma0 is omitted the
    canonical orthogonal complement of gamma1 is used.
    """
    n, r = ds.n, ds.r
    gamma1 = np.asarray(gamma1, dtype=float)
    u = gamma1.shape[1]
    alpha = np.asarray(alpha, dtype=float).ravel()
    eta = np.asarray(eta, dtype=float)
    omega1 = sym(omega1)

    v1 = sym(gamma1 @ omega1 @ gamma1.T)
    resid1 = ds.Y - alpha
    if ds.p:
        resid1 = resid1 - ds.X @ (eta.T @ gamma1.T)
    wr1 = whiten(corr, resid1)
    quad1 = float(np.sum(wr1 * (wr1 @ pinv(v1))))
    l1 = (-0.5 * n * u * LOG_2PI - 0.5 * n * logdet0(v1)
          - 0.5 * u * corr.log_det - 0.5 * quad1)

    if u == r:
        return l1, 0.0

    omega0 = sym(omega0)
    if gamma0 is None:
        from .matalg import orth_complement

        gamma0 = orth_complement(gamma1)
    v0 = sym(gamma0 @ omega0 @ gamma0.T)
    resid0 = ds.Y - alpha
    wr0 = whiten(corr, resid0)
    quad0 = float(np.sum(wr0 * (wr0 @ pinv(v0))))
    l2 = (-0.5 * n * (r - u) * LOG_2PI - 0.5 * n * logdet0(v0)
          - 0.5 * (r - u) * corr.log_det - 0.5 * quad0)
    return l1, l2
