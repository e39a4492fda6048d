import numpy as np
import pytest

from jamfield.cnn import CnnArchitecture, cnn_forward, init_omega
from jamfield.gradients import (
    GradientError,
    NegLogPosterior,
    grad_scalar,
    mean_jacobian_row,
    mean_jacobian_rows,
)
from jamfield.grid import Dataset, FieldRaster, Measurement, make_grid
from jamfield.params import ParamVector
from jamfield.pathloss import pl_grad_field
from jamfield.pooling import PoolingConfig, PriorConfig, build_context, _pl_params

ARCH = CnnArchitecture(dropout=0.0)


def _ctx(h=8, w=8, cell=4.0, seed=0):
    g = make_grid(h, w, cell)
    rng = np.random.default_rng(seed)
    heights = FieldRaster(g, np.where(rng.random(g.shape) < 0.2, 15.0, 0.0), units="m")
    return build_context(heights, ARCH)


def _dataset(ctx, n=5, seed=1):
    rng = np.random.default_rng(seed)
    cells = np.argwhere(ctx.mask)
    idx = rng.choice(len(cells), n, replace=False)
    ms = [Measurement(tuple(cells[i]), float(rng.uniform(-40, 0))) for i in idx]
    return Dataset(ctx.grid, ctx.heights, ms)


def _psi(ctx, seed=0):
    rng = np.random.default_rng(seed)
    return ParamVector(
        init_omega(ctx.arch, rng),
        ctx.grid.height / 2 + rng.uniform(-2, 2, 2),
        rng.uniform(5, 20),
        rng.uniform(2, 8),
    )


class _Quadratic:
    def grad(self, psi):
        return psi.flatten()


class _Constant:
    def grad(self, psi):
        return np.zeros(psi.total_dim)


class TestGradScalar:
    def test_quadratic(self):
        ctx = _ctx()
        psi = _psi(ctx)
        np.testing.assert_array_equal(grad_scalar(_Quadratic(), psi), psi.flatten())

    def test_constant(self):
        ctx = _ctx()
        psi = _psi(ctx)
        np.testing.assert_array_equal(grad_scalar(_Constant(), psi), np.zeros(psi.total_dim))

    def test_nonfinite_reports_group(self):
        class Bad:
            def grad(self, psi):
                g = np.zeros(psi.total_dim)
                g[psi.layout.slices["gamma"]] = np.nan
                return g

        ctx = _ctx()
        with pytest.raises(GradientError, match="gamma"):
            grad_scalar(Bad(), _psi(ctx))

    def test_objective_matches_fd_on_small_dataset(self):
        ctx = _ctx()
        ds = _dataset(ctx, n=3)
        obj = NegLogPosterior(ds, PoolingConfig(lam=0.5), PriorConfig(), ctx)
        psi = _psi(ctx, seed=2)
        g = grad_scalar(obj, psi)
        flat = psi.flatten()
        rng = np.random.default_rng(3)
        h = 1e-4
        # spot-check coordinates from every group plus random directions
        sl = psi.layout.slices
        coords = list(rng.choice(psi.layout.n_omega, 12, replace=False))
        coords += list(range(sl["theta"].start, psi.total_dim))
        for i in coords:
            e = np.zeros_like(flat)
            e[i] = h
            fp = obj.value(ParamVector.from_flat(flat + e, psi.layout))
            fm = obj.value(ParamVector.from_flat(flat - e, psi.layout))
            fd = (fp - fm) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=1e-3, abs=1e-6)
        for _ in range(3):
            v = rng.normal(size=len(flat))
            v /= np.linalg.norm(v)
            fp = obj.value(ParamVector.from_flat(flat + h * v, psi.layout))
            fm = obj.value(ParamVector.from_flat(flat - h * v, psi.layout))
            assert float(g @ v) == pytest.approx((fp - fm) / (2 * h), rel=1e-3, abs=1e-6)


class TestJacobianRows:
    def test_pure_pl_zeroes_omega_block(self):
        ctx = _ctx()
        psi = _psi(ctx)
        p = tuple(np.argwhere(ctx.mask)[0])
        row = mean_jacobian_row(p, psi, PoolingConfig(lam=0.0), ctx)
        sl = psi.layout.slices
        assert np.all(row[sl["omega"]] == 0.0)
        assert np.any(row[sl["theta"].start :] != 0.0)

    def test_pure_cnn_zeroes_pl_block(self):
        ctx = _ctx()
        psi = _psi(ctx)
        p = tuple(np.argwhere(ctx.mask)[0])
        row = mean_jacobian_row(p, psi, PoolingConfig(lam=1.0), ctx)
        sl = psi.layout.slices
        assert np.all(row[sl["theta"].start :] == 0.0)
        assert np.any(row[sl["omega"]] != 0.0)

    def test_mixed_is_weighted_combination(self):
        ctx = _ctx()
        psi = _psi(ctx)
        p = tuple(np.argwhere(ctx.mask)[3])
        pool = PoolingConfig(lam=0.5, beta1=0.4, beta2=0.8)
        row = mean_jacobian_row(p, psi, pool, ctx)
        w1, w2 = pool.weights

        out, cache = cnn_forward(ctx.cnn_input, psi.omega, ctx.arch, mode="eval", want_cache=True)
        from jamfield.cnn import cnn_cell_jacobian

        cnn_row = cnn_cell_jacobian(np.array([p]), cache, psi.omega, ctx.arch)[0]
        pl_row = pl_grad_field(np.array([p]), _pl_params(psi, ctx), ctx.grid)[0]
        sl = psi.layout.slices
        np.testing.assert_allclose(row[sl["omega"]], w1 * cnn_row, rtol=1e-12)
        np.testing.assert_allclose(row[sl["theta"].start :], w2 * pl_row, rtol=1e-12)

    def test_matches_fd_of_frozen_mean(self):
        ctx = _ctx()
        psi = _psi(ctx, seed=5)
        pool = PoolingConfig(lam=0.5)
        p = tuple(np.argwhere(ctx.mask)[5])
        row = mean_jacobian_row(p, psi, pool, ctx)
        _, cache = cnn_forward(ctx.cnn_input, psi.omega, ctx.arch, mode="eval", want_cache=True)
        stats = cache["stats"]
        w1, w2 = pool.weights
        flat = psi.flatten()
        layout = psi.layout

        def mu(vec):
            q = ParamVector.from_flat(vec, layout)
            field = cnn_forward(ctx.cnn_input, q.omega, ctx.arch, mode="eval", frozen_stats=stats)
            from jamfield.pathloss import pl_mean_field

            return float(
                w1 * field[p] + w2 * pl_mean_field(np.array([p]), _pl_params(q, ctx), ctx.grid)[0]
            )

        rng = np.random.default_rng(6)
        h = 1e-4
        idx = list(rng.choice(layout.n_omega, 10, replace=False)) + list(
            range(layout.slices["theta"].start, layout.total_dim)
        )
        for i in idx:
            e = np.zeros_like(flat)
            e[i] = h
            fd = (mu(flat + e) - mu(flat - e)) / (2 * h)
            assert row[i] == pytest.approx(fd, rel=1e-3, abs=1e-6)

    def test_masked_cell_rejected(self):
        ctx = _ctx()
        indoor = np.argwhere(~ctx.mask)
        if len(indoor) == 0:
            pytest.skip("scene has no buildings")
        with pytest.raises(ValueError):
            mean_jacobian_rows(indoor[:1], _psi(ctx), PoolingConfig(), ctx)


class TestLinearity:
    def test_sum_of_per_measurement_gradients(self):
        # the data term is a sum over measurements, so its gradient is the
        # sum of singleton-dataset gradients (prior term subtracted once)
        ctx = _ctx()
        ds = _dataset(ctx, n=4, seed=7)
        pool = PoolingConfig(lam=0.5)
        priors = PriorConfig()
        psi = _psi(ctx, seed=8)
        from jamfield.pooling import prior_grad, weighted_centroid

        mu_c = weighted_centroid(ds, priors.tau)
        full = NegLogPosterior(ds, pool, priors, ctx)
        g_full = full.grad(psi) - prior_grad(psi, priors, mu_c)
        g_sum = np.zeros_like(g_full)
        for m in ds.measurements:
            single = Dataset(ctx.grid, ctx.heights, [m])
            obj = NegLogPosterior(single, pool, priors, ctx)
            g_sum += obj.grad(psi) - prior_grad(psi, priors, weighted_centroid(single, priors.tau))
        np.testing.assert_allclose(g_full, g_sum, rtol=1e-9, atol=1e-12)


class TestDescentDirection:
    def test_objective_decreases_along_negative_gradient(self):
        ctx = _ctx()
        ds = _dataset(ctx, n=4, seed=9)
        obj = NegLogPosterior(ds, PoolingConfig(lam=0.5), PriorConfig(), ctx)
        rng = np.random.default_rng(10)
        for seed in range(3):
            psi = _psi(ctx, seed=seed)
            val = obj.value(psi)
            g = obj.grad(psi)
            step = 1e-7 / (1.0 + np.linalg.norm(g))
            stepped = ParamVector.from_flat(psi.flatten() - step * g, psi.layout)
            assert obj.value(stepped) <= val + 1e-12
