import numpy as np
import pytest

from flexmodal.errors import NumericalError, ValidationError
from flexmodal.tps import (
    TpsSurface, eval_tps, eval_tps_grid, eval_tps_gradient,
    fit_tps, interpolate_mode_shapes, loocv_select,
)


def scatter_points(rng, n=16):
    return rng.uniform(-0.15, 0.15, (n, 2))


class TestFit:
    def test_exact_interpolation_at_zero_smoothing(self, rng):
        pts = scatter_points(rng)
        z = rng.standard_normal(16)
        surf = fit_tps(pts, z, 0.0)
        got = np.array([eval_tps(surf, p) for p in pts])
        np.testing.assert_allclose(got, z, atol=1e-8 * np.abs(z).max())

    @pytest.mark.parametrize("lam", [0.0, 1e-3, 0.1, 10.0])
    def test_plane_reproduced_with_zero_kernel_coeffs(self, rng, lam):
        pts = scatter_points(rng)
        z = 1.0 + 2.0 * pts[:, 0] - pts[:, 1]
        surf = fit_tps(pts, z, lam)
        np.testing.assert_allclose(surf.coeff_kernel, 0.0, atol=1e-10)
        # plane coefficients come back in original units
        assert eval_tps(surf, (0.0, 0.0)) == pytest.approx(1.0, abs=1e-9)
        g = eval_tps_gradient(surf, (0.03, -0.02))
        np.testing.assert_allclose(g, [2.0, -1.0], atol=1e-8)

    def test_residual_identity(self, rng):
        # z_k - W(x_k, y_k) = lam * c_k at every data point
        pts = scatter_points(rng)
        z = rng.standard_normal(16)
        lam = 0.1
        surf = fit_tps(pts, z, lam)
        got = np.array([z[k] - eval_tps(surf, pts[k]) for k in range(16)])
        np.testing.assert_allclose(got, lam * surf.coeff_kernel, atol=1e-10)

    def test_side_constraints(self, rng):
        pts = scatter_points(rng)
        z = rng.standard_normal(16)
        surf = fit_tps(pts, z, 0.01)
        c = surf.coeff_kernel
        pn = (surf.centers - surf.origin) / surf.scale
        scale = np.abs(c).max() + 1e-30
        assert abs(c.sum()) < 1e-10 * scale
        assert abs((c * pn[:, 0]).sum()) < 1e-10 * scale
        assert abs((c * pn[:, 1]).sum()) < 1e-10 * scale

    def test_collinear_points_rejected(self):
        pts = np.column_stack([np.linspace(0, 1, 8), 2.0 * np.linspace(0, 1, 8)])
        with pytest.raises(NumericalError):
            fit_tps(pts, np.ones(8), 0.0)

    def test_too_few_points_rejected(self):
        with pytest.raises(ValidationError):
            fit_tps([[0, 0], [1, 0]], [1.0, 2.0], 0.0)

    def test_negative_smoothing_rejected(self, rng):
        pts = scatter_points(rng)
        with pytest.raises(ValidationError):
            fit_tps(pts, np.ones(16), -1.0)

    def test_misfit_grows_with_smoothing(self, rng):
        pts = scatter_points(rng)
        z = rng.standard_normal(16)
        misfit = []
        for lam in [0.0, 1e-3, 1e-2, 1e-1, 1.0]:
            surf = fit_tps(pts, z, lam)
            misfit.append(float(np.sum(surf.fit_residual**2)))
        assert all(a <= b + 1e-12 for a, b in zip(misfit, misfit[1:]))

    def test_large_smoothing_approaches_plane_regression(self, rng):
        pts = scatter_points(rng)
        z = rng.standard_normal(16)
        surf = fit_tps(pts, z, 1e12)
        P = np.column_stack([np.ones(16), pts])
        beta, *_ = np.linalg.lstsq(P, z, rcond=None)
        got = np.array([eval_tps(surf, p) for p in pts])
        np.testing.assert_allclose(got, P @ beta, rtol=1e-6, atol=1e-6 * np.abs(z).max())


class TestEval:
    def test_center_value_at_zero_smoothing(self, rng):
        pts = scatter_points(rng)
        z = rng.standard_normal(16)
        surf = fit_tps(pts, z, 0.0)
        assert eval_tps(surf, pts[4]) == pytest.approx(z[4], abs=1e-9)

    def test_kernel_zero_at_unit_radius(self):
        # r = 1 (normalized units) makes that kernel term vanish: ln 1 = 0
        surf = TpsSurface(
            centers=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
            coeff_poly=np.zeros(3),
            coeff_kernel=np.array([1.0, 0.0, 0.0, 0.0]),
            lam=0.0, origin=np.zeros(2), scale=1.0, fit_residual=np.zeros(4),
        )
        assert eval_tps(surf, (1.0, 0.0)) == pytest.approx(0.0, abs=1e-15)
        assert eval_tps(surf, (0.0, 0.0)) == pytest.approx(0.0, abs=1e-15)

    def test_gradient_matches_finite_differences(self, rng):
        pts = scatter_points(rng)
        z = rng.standard_normal(16)
        surf = fit_tps(pts, z, 1e-3)
        for p in [(0.02, 0.03), (-0.1, 0.05), (0.0, 0.0)]:
            g = eval_tps_gradient(surf, p)
            h = 1e-6
            fd = np.array([
                (eval_tps(surf, (p[0] + h, p[1])) - eval_tps(surf, (p[0] - h, p[1]))) / (2 * h),
                (eval_tps(surf, (p[0], p[1] + h)) - eval_tps(surf, (p[0], p[1] - h))) / (2 * h),
            ])
            np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-6 * np.abs(g).max())

    def test_grid_eval_matches_pointwise(self, rng):
        pts = scatter_points(rng)
        z = rng.standard_normal(16)
        surf = fit_tps(pts, z, 1e-2)
        xs = np.linspace(-0.1, 0.1, 4)
        ys = np.linspace(-0.1, 0.1, 3)
        grid = eval_tps_grid(surf, xs, ys)
        for a, y in enumerate(ys):
            for b, x in enumerate(xs):
                assert grid[a, b] == pytest.approx(eval_tps(surf, (x, y)), rel=1e-12)


class TestLoocv:
    def test_plane_data_ties_to_largest_lambda(self, rng):
        pts = scatter_points(rng)
        z = 0.5 - pts[:, 0] + 3.0 * pts[:, 1]
        grid = np.logspace(-6, 2, 9)
        lam, errors = loocv_select(pts, z, grid)
        assert lam == grid[-1]
        assert np.nanmax(errors) < 1e-12

    def test_single_element_grid(self, rng):
        pts = scatter_points(rng)
        z = rng.standard_normal(16)
        lam, errors = loocv_select(pts, z, [0.37])
        assert lam == 0.37
        assert errors.shape == (1,)

    def test_smoothing_beats_interpolation_under_noise(self):
        # smooth shape + noise: LOOCV at the selected lam should beat lam = 0
        # in at least 90% of seeded trials
        wins = 0
        trials = 50
        grid = np.concatenate([[0.0], np.logspace(-7, 1, 17)])
        for seed in range(trials):
            r = np.random.default_rng(seed)
            pts = r.uniform(-0.15, 0.15, (16, 2))
            z = np.sin(5.0 * pts[:, 0]) * np.cos(4.0 * pts[:, 1])
            z += 0.3 * np.abs(z).max() * r.standard_normal(16)
            lam, errors = loocv_select(pts, z, grid)
            at_lam = errors[int(np.flatnonzero(grid == lam)[0])]
            if lam > 0.0 and at_lam < errors[0]:
                wins += 1
        assert wins >= 0.9 * trials

    def test_too_few_points(self, rng):
        with pytest.raises(ValidationError):
            loocv_select(rng.uniform(0, 1, (4, 2)), np.ones(4), [0.1])


class TestModeShapeInterpolation:
    def test_rigid_piston_column_gives_plane(self, rng):
        pts = scatter_points(rng)
        shapes = np.column_stack([np.ones(16), pts[:, 0] * pts[:, 1]])
        surfaces = interpolate_mode_shapes(shapes, pts, np.logspace(-8, 0, 5))
        piston = surfaces[0]
        np.testing.assert_allclose(piston.coeff_kernel, 0.0, atol=1e-9)
        assert eval_tps(piston, (0.01, 0.02)) == pytest.approx(1.0, abs=1e-8)

    def test_torsion_shape_reconstruction(self):
        # x*y sampled at the 16-sensor bench layout, reconstructed on a
        # 20x20 grid over the sensed region
        from flexmodal.synth import sensor_layout

        coords = sensor_layout(0.23, 0.18)
        z = coords[:, 0] * coords[:, 1]
        surfaces = interpolate_mode_shapes(z[:, None], coords, np.logspace(-8, -2, 7))
        xs = np.linspace(-0.115, 0.115, 20)
        ys = np.linspace(-0.09, 0.09, 20)
        grid = eval_tps_grid(surfaces[0], xs, ys)
        ex, ey = np.meshgrid(xs, ys)
        want = ex * ey
        rms = np.sqrt(np.mean((grid - want) ** 2))
        assert rms < 0.02 * np.abs(want).max()

    def test_column_count(self, rng):
        pts = scatter_points(rng)
        shapes = rng.standard_normal((16, 12))
        surfaces = interpolate_mode_shapes(shapes, pts, [1e-4, 1e-2])
        assert len(surfaces) == 12

    def test_non_finite_rejected(self, rng):
        pts = scatter_points(rng)
        shapes = np.ones((16, 2))
        shapes[3, 1] = np.nan
        with pytest.raises(ValidationError):
            interpolate_mode_shapes(shapes, pts, [0.1])
