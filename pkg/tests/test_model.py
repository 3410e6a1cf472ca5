import numpy as np
import pytest

from conftest import rand_orth, rand_pd
from spenv import model
from spenv.spatialcov import MaternModel, correlation_matrix, identity_correlation


def make_dataset(rng, n=8, r=2, p=2):
    return model.SpatialDataset(loc=rng.uniform(size=(n, 2)),
                                Y=rng.standard_normal((n, r)),
                                X=rng.standard_normal((n, p)))


def make_corr(rng, n, range_param=0.6):
    loc = rng.uniform(size=(n, 2))
    return loc, correlation_matrix(loc, MaternModel(range_param, 0.5, nugget=0.0))


class TestSpatialDataset:
    def test_shapes(self, rng):
        ds = make_dataset(rng, n=10, r=3, p=2)
        assert (ds.n, ds.r, ds.p) == (10, 3, 2)

    def test_rejects_nonfinite(self, rng):
        y = rng.standard_normal((8, 2))
        y[0, 0] = np.nan
        with pytest.raises(ValueError):
            model.SpatialDataset(loc=rng.uniform(size=(8, 2)), Y=y,
                                 X=rng.standard_normal((8, 1)))

    def test_rejects_too_few_rows(self, rng):
        with pytest.raises(ValueError):
            model.SpatialDataset(loc=rng.uniform(size=(3, 2)),
                                 Y=rng.standard_normal((3, 1)),
                                 X=rng.standard_normal((3, 3)))


class TestCenter:
    def test_idempotent(self, rng):
        ds = make_dataset(rng)
        cd = model.center(ds)
        ds2 = model.SpatialDataset(loc=ds.loc, Y=cd.H, X=cd.G)
        cd2 = model.center(ds2)
        assert np.allclose(cd2.H, cd.H)
        assert np.allclose(cd2.ybar, 0.0)

    def test_constant_covariate_column(self, rng):
        x = np.column_stack([np.full(8, 3.0), rng.standard_normal(8)])
        ds = model.SpatialDataset(loc=rng.uniform(size=(8, 2)),
                                  Y=rng.standard_normal((8, 2)), X=x)
        cd = model.center(ds)
        assert np.allclose(cd.G[:, 0], 0.0)

    def test_column_sums_vanish(self, rng):
        cd = model.center(make_dataset(rng, n=6, r=3))
        assert np.abs(cd.H.sum(axis=0)).max() < 1e-10
        assert np.abs(cd.G.sum(axis=0)).max() < 1e-10


class TestGlsBeta:
    def test_identity_matches_ols(self, rng):
        ds = make_dataset(rng, n=12, r=3, p=2)
        cd = model.center(ds)
        beta = model.gls_beta(cd, identity_correlation(ds.n))
        ols = np.linalg.lstsq(cd.G, cd.H, rcond=None)[0].T
        assert np.allclose(beta, ols, atol=1e-10)

    def test_exact_recovery(self, rng):
        n, r, p = 10, 3, 2
        g = rng.standard_normal((n, p))
        g = g - g.mean(axis=0)
        beta0 = rng.standard_normal((r, p))
        cd = model.CenteredData(H=g @ beta0.T, G=g, ybar=np.zeros(r),
                                xbar=np.zeros(p))
        loc, corr = make_corr(rng, n)
        assert np.allclose(model.gls_beta(cd, corr), beta0, atol=1e-10)

    def test_dense_normal_equation_oracle(self, rng):
        n = 5
        loc, corr = make_corr(rng, n)
        cd = model.center(model.SpatialDataset(
            loc=loc, Y=rng.standard_normal((n, 2)),
            X=rng.standard_normal((n, 2))))
        beta = model.gls_beta(cd, corr)
        rho_inv = np.linalg.inv(corr.rho)
        direct = np.linalg.solve(cd.G.T @ rho_inv @ cd.G,
                                 cd.G.T @ rho_inv @ cd.H).T
        assert np.allclose(beta, direct, atol=1e-9)

    def test_collinear_raises(self, rng):
        x1 = rng.standard_normal(10)
        ds = model.SpatialDataset(loc=rng.uniform(size=(10, 2)),
                                  Y=rng.standard_normal((10, 2)),
                                  X=np.column_stack([x1, 2.0 * x1]))
        with pytest.raises(model.RankDeficientError):
            model.gls_beta(model.center(ds), identity_correlation(10))

    def test_no_covariates(self, rng):
        cd = model.center(make_dataset(rng, p=0))
        assert model.gls_beta(cd, identity_correlation(8)).shape == (2, 0)


class TestMoments:
    def test_no_covariates(self, rng):
        cd = model.center(make_dataset(rng, p=0))
        mom = model.moments(cd, identity_correlation(8))
        assert np.allclose(mom.sigma_res, mom.sigma_Y)

    def test_noise_free(self, rng):
        n, p, r = 9, 2, 3
        g = rng.standard_normal((n, p))
        g = g - g.mean(axis=0)
        beta0 = rng.standard_normal((r, p))
        cd = model.CenteredData(H=g @ beta0.T, G=g, ybar=np.zeros(r),
                                xbar=np.zeros(p))
        loc, corr = make_corr(rng, n)
        mom = model.moments(cd, corr)
        assert np.abs(mom.sigma_res).max() < 1e-10

    def test_unwhitened_formula(self, rng):
        n = 8
        loc, corr = make_corr(rng, n)
        cd = model.center(model.SpatialDataset(
            loc=loc, Y=rng.standard_normal((n, 2)),
            X=rng.standard_normal((n, 1))))
        mom = model.moments(cd, corr)
        ri = np.linalg.inv(corr.rho)
        sy = cd.H.T @ ri @ cd.H / n
        cross = cd.H.T @ ri @ cd.G
        sres = sy - cross @ np.linalg.solve(cd.G.T @ ri @ cd.G, cross.T) / n
        assert np.allclose(mom.sigma_Y, sy, atol=1e-9)
        assert np.allclose(mom.sigma_res, sres, atol=1e-9)


class TestLoglikFull:
    def test_degenerate_case(self):
        ds = model.SpatialDataset(loc=np.zeros((1, 2)), Y=np.zeros((1, 1)),
                                  X=np.zeros((1, 0)))
        ll = model.loglik_full(ds, np.zeros(1), np.zeros((1, 0)),
                               np.eye(1), identity_correlation(1))
        # only the 2 pi constant survives: zero residual, unit determinants
        assert ll == pytest.approx(-0.5 * np.log(2 * np.pi))

    def test_residual_monotonicity(self, rng):
        ds = make_dataset(rng, n=6, r=2, p=1)
        v = rand_pd(rng, 2)
        corr = identity_correlation(6)
        beta = rng.standard_normal((2, 1))
        alpha = ds.Y.mean(axis=0)
        base = model.loglik_full(ds, alpha, beta, v, corr)
        ds2 = model.SpatialDataset(loc=ds.loc, Y=alpha + 2.0 * (ds.Y - alpha),
                                   X=ds.X)
        worse = model.loglik_full(ds2, alpha, 2.0 * beta, v, corr)
        # doubling the residuals with V fixed can only lower the likelihood
        assert worse < base

    def test_dense_kronecker_oracle(self, rng):
        n, r = 4, 2
        loc, corr = make_corr(rng, n)
        ds = model.SpatialDataset(loc=loc, Y=rng.standard_normal((n, r)),
                                  X=rng.standard_normal((n, 1)))
        v = rand_pd(rng, r)
        alpha = rng.standard_normal(r)
        beta = rng.standard_normal((r, 1))
        ll = model.loglik_full(ds, alpha, beta, v, corr)
        resid = ds.Y - alpha - ds.X @ beta.T
        sigma = np.kron(v, corr.rho)
        yv = resid.reshape(-1, order="F")
        sign, logdet = np.linalg.slogdet(sigma)
        dense = (-0.5 * n * r * np.log(2 * np.pi) - 0.5 * logdet
                 - 0.5 * yv @ np.linalg.solve(sigma, yv))
        assert ll == pytest.approx(dense, rel=1e-9)


class TestLoglikFactored:
    @staticmethod
    def random_instance(rng, n, r, u, p):
        g = rand_orth(rng, r)
        g1, g0 = g[:, :u], g[:, u:]
        o1 = rand_pd(rng, u)
        o0 = rand_pd(rng, r - u) if u < r else np.zeros((0, 0))
        eta = rng.standard_normal((u, p))
        alpha = rng.standard_normal(r)
        loc = rng.uniform(size=(n, 2))
        corr = correlation_matrix(
            loc, MaternModel(float(rng.uniform(0.2, 1.5)), 0.5, nugget=0.0))
        ds = model.SpatialDataset(loc=loc, Y=rng.standard_normal((n, r)),
                                  X=rng.standard_normal((n, p)))
        return ds, corr, alpha, eta, g1, g0, o1, o0

    def test_full_dimension_reduces(self, rng):
        ds, corr, alpha, eta, g1, g0, o1, o0 = self.random_instance(
            rng, 6, 2, 2, 1)
        l1, l2 = model.loglik_factored(ds, alpha, eta, g1, o1, o0, corr)
        full = model.loglik_full(ds, alpha, g1 @ eta, g1 @ o1 @ g1.T, corr)
        assert l2 == 0.0
        assert l1 == pytest.approx(full, rel=1e-10)

    def test_null_regression_uses_raw_response(self, rng):
        ds, corr, alpha, eta, g1, g0, o1, o0 = self.random_instance(
            rng, 6, 3, 1, 2)
        l1a, _ = model.loglik_factored(ds, alpha, np.zeros_like(eta), g1, o1,
                                       o0, corr, gamma0=g0)
        ds0 = model.SpatialDataset(loc=ds.loc, Y=ds.Y, X=np.zeros_like(ds.X))
        l1b, _ = model.loglik_factored(ds0, alpha, eta, g1, o1, o0, corr,
                                       gamma0=g0)
        assert l1a == pytest.approx(l1b, rel=1e-12)

    def test_factorization_identity(self, rng):
        ds, corr, alpha, eta, g1, g0, o1, o0 = self.random_instance(
            rng, 5, 3, 1, 2)
        v = g1 @ o1 @ g1.T + g0 @ o0 @ g0.T
        full = model.loglik_full(ds, alpha, g1 @ eta, v, corr)
        l1, l2 = model.loglik_factored(ds, alpha, eta, g1, o1, o0, corr,
                                       gamma0=g0)
        assert l1 + l2 == pytest.approx(full, rel=1e-10)
