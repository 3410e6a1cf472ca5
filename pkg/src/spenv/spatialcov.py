"""Spatial correlation machinery.

Matern correlation with range and smoothness parameters, cached Cholesky
factorizations with a small escalating diagonal jitter, whitening against a
correlation factor, Moran's I with a randomization-based null, and the
classical binned empirical semivariogram.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist
from scipy.special import gamma as gamma_fn
from scipy.special import kv
from scipy.stats import norm

DEFAULT_NUGGET = 1e-10
MAX_NUGGET = 1e-6


class NotPositiveDefiniteError(ValueError):
    """Raised when a correlation matrix cannot be factored even with jitter."""


@dataclass(frozen=True)
class MaternModel:
    """Matern covariance parameters.

    range_param and smoothness are the correlation parameters; scale is the
    marginal standard deviation (only relevant when generating data, since
    fitted correlation matrices are normalized to one at distance zero);
    nugget is the relative diagonal jitter added before factorization.
    """

    range_param: float
    smoothness: float
    scale: float = 1.0
    nugget: float = DEFAULT_NUGGET

    def __post_init__(self):
        if not (self.range_param > 0):
            raise ValueError(f"range must be positive, got {self.range_param}")
        if not (self.smoothness > 0):
            raise ValueError(f"smoothness must be positive, got {self.smoothness}")
        if not (self.scale > 0):
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.nugget < 0:
            raise ValueError(f"nugget must be nonnegative, got {self.nugget}")


def pairwise_dist(loc):
    """Euclidean distance matrix for an n x d array of coordinates."""
    loc = np.atleast_2d(np.asarray(loc, dtype=float))
    return cdist(loc, loc)


def matern(h, model):
    """Matern covariance at distances h.

    sigma^2 * 2^(1-nu) / Gamma(nu) * (h / range)^nu * K_nu(h / range),
    continuously extended to sigma^2 at h = 0. At nu = 1/2 this reduces to
    the exponential kernel sigma^2 * exp(-h / range).
    """
    h = np.asarray(h, dtype=float)
    nu = model.smoothness
    s2 = model.scale**2
    scalar = h.ndim == 0
    h = np.atleast_1d(h)
    if nu == 0.5:
        out = s2 * np.exp(-h / model.range_param)
        return float(out.ravel()[0]) if scalar and out.size == 1 else out
    if (h.ndim == 2 and h.shape[0] == h.shape[1] and h.shape[0] > 1
            and np.array_equal(h, h.T)):
        # Bessel evaluations dominate; a symmetric matrix needs only one
        # triangle of them
        iu = np.triu_indices(h.shape[0], k=1)
        vals = matern(h[iu], model)
        out = np.full(h.shape, s2)
        out[iu] = vals
        out[(iu[1], iu[0])] = vals
        return out
    out = np.full(h.shape, s2)
    pos = h > 0
    if pos.any():
        t = h[pos] / model.range_param
        out[pos] = s2 * (2.0 ** (1.0 - nu) / gamma_fn(nu)) * t**nu * kv(nu, t)
    return float(out[0]) if scalar and out.size == 1 else out


def matern_correlation(h, model):
    """Matern correlation (unit value at distance zero)."""
    return matern(h, model) / model.scale**2


@dataclass(frozen=True)
class CorrelationMatrix:
    """A positive-definite spatial correlation matrix with cached factorization."""

    rho: np.ndarray
    chol: np.ndarray  # lower Cholesky factor
    log_det: float
    nugget_used: float
    model: MaternModel | None = None

    @property
    def n(self):
        return self.rho.shape[0]

    def solve(self, m):
        """rho^{-1} m using the cached factor."""
        return cho_solve((self.chol, True), np.asarray(m, dtype=float))


def _factor(rho, nugget):
    a = rho.copy()
    idx = np.diag_indices_from(a)
    a[idx] = a[idx] + nugget
    try:
        lower = cholesky(a, lower=True)
    except np.linalg.LinAlgError:
        return None
    return lower


def build_correlation(rho, nugget=DEFAULT_NUGGET, model=None, max_nugget=MAX_NUGGET):
    """Wrap a raw correlation matrix, escalating the jitter tenfold on failure."""
    rho = np.asarray(rho, dtype=float)
    level = nugget
    while True:
        lower = _factor(rho, level)
        if lower is not None:
            log_det = 2.0 * float(np.log(np.diag(lower)).sum())
            return CorrelationMatrix(rho=rho, chol=lower, log_det=log_det,
                                     nugget_used=level, model=model)
        if level >= max_nugget or level == 0:
            eigs = np.linalg.eigvalsh(rho)
            raise NotPositiveDefiniteError(
                f"correlation matrix not positive definite at jitter {level:g}; "
                f"smallest eigenvalue {eigs[0]:.3e}")
        level = min(level * 10.0, max_nugget)


def correlation_matrix(loc, model, max_nugget=MAX_NUGGET):
    """Matern correlation matrix over a set of sites, with cached Cholesky factor."""
    d = pairwise_dist(loc)
    rho = matern_correlation(d, model)
    return build_correlation(rho, nugget=model.nugget, model=model,
                             max_nugget=max_nugget)


def identity_correlation(n):
    """The no-correlation special case (independent sites)."""
    eye = np.eye(n)
    return CorrelationMatrix(rho=eye, chol=eye, log_det=0.0, nugget_used=0.0,
                             model=None)


def whiten(corr, m):
    """L^{-1} m for the cached lower Cholesky factor L of the correlation."""
    return solve_triangular(corr.chol, np.asarray(m, dtype=float), lower=True)


@dataclass(frozen=True)
class MoransI:
    observed: float
    expected: float
    sd: float
    p_value: float


def morans_i(values, loc):
    """Moran's I with inverse-distance weights.

    Weights are 1/d_ij without row standardization. The expected value under
    no autocorrelation is -1/(n-1); the standard deviation comes from the
    closed-form randomization variance and the p-value is two-sided normal.
    """
    x = np.asarray(values, dtype=float).ravel()
    n = x.size
    if n < 4:
        raise ValueError("Moran's I needs at least 4 observations")
    d = pairwise_dist(loc)
    off = ~np.eye(n, dtype=bool)
    if np.any(d[off] == 0):
        raise ValueError("duplicate sites give infinite inverse-distance weights")
    w = np.zeros((n, n))
    w[off] = 1.0 / d[off]

    z = x - x.mean()
    denom = float(z @ z)
    if denom == 0:
        raise ValueError("values are constant; Moran's I is undefined")
    s0 = w.sum()
    obs = (n / s0) * float(z @ w @ z) / denom

    expected = -1.0 / (n - 1)
    s1 = 0.5 * ((w + w.T) ** 2).sum()
    s2 = ((w.sum(axis=1) + w.sum(axis=0)) ** 2).sum()
    kurt = n * (z**4).sum() / denom**2
    var = (n * ((n**2 - 3 * n + 3) * s1 - n * s2 + 3 * s0**2)
           - kurt * ((n**2 - n) * s1 - 2 * n * s2 + 6 * s0**2))
    var = var / ((n - 1) * (n - 2) * (n - 3) * s0**2) - expected**2
    sd = float(np.sqrt(max(var, 0.0)))
    if sd == 0:
        p = 1.0
    else:
        p = 2.0 * float(norm.sf(abs(obs - expected) / sd))
    return MoransI(observed=float(obs), expected=float(expected), sd=sd,
                   p_value=min(p, 1.0))


@dataclass(frozen=True)
class VariogramBin:
    lower: float
    upper: float
    midpoint: float
    n_pairs: int
    semivariance: float  # nan for empty bins


def empirical_variogram(values, loc, n_bins=15, max_dist=None):
    """Binned method-of-moments semivariogram.

    gamma(bin) = sum over pairs in the bin of (x_i - x_j)^2 / (2 N_bin),
    over equal-width distance bins on (0, max_dist]. max_dist defaults to
    half the largest pairwise distance.
    """
    x = np.asarray(values, dtype=float).ravel()
    d = pairwise_dist(loc)
    n = x.size
    iu, ju = np.triu_indices(n, k=1)
    dist = d[iu, ju]
    sqdiff = (x[iu] - x[ju]) ** 2
    if max_dist is None:
        max_dist = float(dist.max()) / 2.0
    if not (max_dist > 0):
        raise ValueError("max_dist must be positive")
    edges = np.linspace(0.0, max_dist, n_bins + 1)
    bins = []
    for k in range(n_bins):
        lo, hi = edges[k], edges[k + 1]
        mask = (dist > lo) & (dist <= hi)
        m = int(mask.sum())
        gamma = float(sqdiff[mask].sum() / (2.0 * m)) if m else float("nan")
        bins.append(VariogramBin(lower=float(lo), upper=float(hi),
                                 midpoint=float((lo + hi) / 2), n_pairs=m,
                                 semivariance=gamma))
    return bins


def with_params(model, **kwargs):
    """Convenience copy-with-changes for MaternModel."""
    return replace(model, **kwargs)
