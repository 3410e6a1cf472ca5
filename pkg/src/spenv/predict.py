"""Conditional prediction at new sites.

With error covariance V (x) rho, the conditional mean of the responses at
new sites given the observed ones reduces to universal kriging applied
response by response: the cross-correlation weights do not involve V, which
enters only the conditional covariance V (x) (rho_nn - rho_no rho_oo^-1
rho_on).
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .matalg import sym
from .spatialcov import correlation_matrix, matern_correlation


@dataclass(frozen=True)
class PredictionResult:
    mean: np.ndarray  # m x r conditional means
    sd: np.ndarray  # m x r marginal predictive standard deviations
    cov: np.ndarray | None = None  # mr x mr covariance of vec(mean), V (x) S


def _mean_surface(fitres, x):
    beta = fitres.beta
    alpha = fitres.alpha
    if beta.shape[1]:
        return alpha + x @ beta.T
    return np.broadcast_to(alpha, (x.shape[0], alpha.size)).copy()


def predict(fitres, ds, new_loc, new_x=None, want_cov=False):
    """Conditional prediction at new sites given the observed responses.

    fitres is a fitted model, ds the data it was fitted to. new_x defaults to
    the training covariate means. A fit without spatial correlation predicts
    with the regression surface alone.
    """
    new_loc = np.atleast_2d(np.asarray(new_loc, dtype=float))
    m = new_loc.shape[0]
    r = ds.r
    if new_x is None:
        new_x = np.broadcast_to(ds.X.mean(axis=0), (m, ds.p)).copy()
    new_x = np.atleast_2d(np.asarray(new_x, dtype=float))
    if new_x.shape != (m, ds.p):
        raise ValueError(f"new_x must be {m} x {ds.p}, got {new_x.shape}")

    mean_new = _mean_surface(fitres, new_x)
    v = fitres.params.v
    theta = fitres.params.theta
    if theta is None:
        sd = np.sqrt(np.maximum(np.diag(v), 0.0))
        sd = np.broadcast_to(sd, (m, r)).copy()
        cov = np.kron(v, np.eye(m)) if want_cov else None
        return PredictionResult(mean=mean_new, sd=sd, cov=cov)

    corr = correlation_matrix(ds.loc, theta)
    rho_no = matern_correlation(cdist(new_loc, ds.loc), theta)
    resid = ds.Y - _mean_surface(fitres, ds.X)
    mean = mean_new + rho_no @ corr.solve(resid)

    rho_nn = matern_correlation(cdist(new_loc, new_loc), theta)
    cond = rho_nn - rho_no @ corr.solve(rho_no.T)
    cond = sym(np.asarray(cond))
    s_diag = np.maximum(np.diag(cond), 0.0)
    sd = np.sqrt(np.outer(s_diag, np.maximum(np.diag(v), 0.0)))
    cov = np.kron(v, cond) if want_cov else None
    return PredictionResult(mean=mean, sd=sd, cov=cov)


@dataclass(frozen=True)
class GridPrediction:
    coords: np.ndarray  # m x 2 grid sites, row-major over the lattice
    mean: np.ndarray
    sd: np.ndarray
    failed: np.ndarray  # boolean mask per grid site (covariate provider errors)


def predict_grid(fitres, ds, bbox, resolution, new_x_provider=None,
                 tile_size=1024):
    """Predict over a regular lattice inside a bounding box.

    bbox is (xmin, ymin, xmax, ymax); resolution the number of points per
    axis. new_x_provider maps an m x 2 coordinate array to an m x p covariate
    matrix; when omitted, training means are used. Provider failures mark the
    affected tile in the failure mask instead of aborting the whole surface.
    """
    xmin, ymin, xmax, ymax = (float(b) for b in bbox)
    if not (xmax > xmin and ymax > ymin):
        raise ValueError("bounding box must have positive extent")
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    gx = np.linspace(xmin, xmax, resolution)
    gy = np.linspace(ymin, ymax, resolution)
    xx, yy = np.meshgrid(gx, gy)
    coords = np.column_stack([xx.ravel(), yy.ravel()])
    m = coords.shape[0]
    mean = np.full((m, ds.r), np.nan)
    sd = np.full((m, ds.r), np.nan)
    failed = np.zeros(m, dtype=bool)
    for start in range(0, m, tile_size):
        idx = slice(start, min(start + tile_size, m))
        tile = coords[idx]
        if new_x_provider is not None:
            try:
                tx = np.atleast_2d(np.asarray(new_x_provider(tile), dtype=float))
                if tx.shape != (tile.shape[0], ds.p):
                    raise ValueError("provider returned wrong shape")
            except Exception:
                failed[idx] = True
                continue
        else:
            tx = None
        res = predict(fitres, ds, tile, new_x=tx)
        mean[idx] = res.mean
        sd[idx] = res.sd
    return GridPrediction(coords=coords, mean=mean, sd=sd, failed=failed)
