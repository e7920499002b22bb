import numpy as np
import pytest

from flexmodal.errors import NumericalError, ValidationError
from flexmodal.modal import (
    ModalModel, PositionDependentModel, ScheduleMap,
    apply_schedule, eval_at_position, frf_eval,
)
from flexmodal.tps import fit_tps

from conftest import random_modal_model, resolvent_frf


def single_mode(omega2=4.0, zeta=0.0, shape=1.0, gain=1.0):
    return ModalModel(
        omega2=[omega2], zeta=[zeta], mode_shapes=[[shape]], input_gains=[[gain]],
        sensor_coords=[[0.0, 0.0]], n_rigid=1 if omega2 == 0 else 0,
    )


class TestFrfEval:
    def test_static_gain_single_mode(self):
        # G(0) = R / omega^2 = 1/4 for a flexible mode
        m = single_mode()
        g = frf_eval(m, [0.0])
        assert g[0, 0, 0] == pytest.approx(0.25)

    def test_rigid_body_double_integrator_slope(self):
        m = single_mode(omega2=0.0)
        w = np.array([1.0, 10.0, 100.0])
        mag = np.abs(frf_eval(m, w)[0, 0, :])
        np.testing.assert_allclose(mag, 1.0 / w**2, rtol=1e-12)
        slopes = np.diff(np.log10(mag)) / np.diff(np.log10(w))
        np.testing.assert_allclose(slopes, -2.0, atol=1e-12)

    def test_rigid_body_at_zero_frequency_rejected(self):
        m = single_mode(omega2=0.0)
        with pytest.raises(NumericalError):
            frf_eval(m, [0.0, 1.0])

    def test_matches_state_space_resolvent(self, rng):
        w = np.logspace(1, 4, 50)
        for k in range(5):
            m = random_modal_model(rng, n_flex=3 + k, n_rigid=k % 3)
            got = frf_eval(m, w)
            want = resolvent_frf(m, w)
            np.testing.assert_allclose(got, want, rtol=1e-10)

    def test_linearity_in_shapes(self, rng):
        m = random_modal_model(rng)
        m2 = ModalModel(
            omega2=m.omega2, zeta=m.zeta, mode_shapes=2.0 * m.mode_shapes,
            input_gains=m.input_gains, sensor_coords=m.sensor_coords, n_rigid=m.n_rigid,
        )
        w = np.logspace(1, 4, 20)
        # doubling is exact in binary floating point
        assert np.array_equal(frf_eval(m2, w), 2.0 * frf_eval(m, w))

    def test_conjugate_symmetry(self, rng):
        m = random_modal_model(rng, n_rigid=0)
        w = np.logspace(1, 3, 15)
        np.testing.assert_allclose(
            frf_eval(m, -w), np.conj(frf_eval(m, w)), rtol=1e-13
        )

    def test_poles_strictly_stable_for_damped_modes(self, rng):
        m = random_modal_model(rng, n_flex=5)
        assert np.all(m.pole_pairs().real < 0)


class TestModelInvariants:
    def test_mode_ordering_canonical(self):
        m = ModalModel(
            omega2=[9.0, 1.0, 4.0], zeta=[0.3, 0.1, 0.2],
            mode_shapes=np.eye(3), input_gains=np.eye(3),
            sensor_coords=np.zeros((3, 2)),
        )
        np.testing.assert_array_equal(m.omega2, [1.0, 4.0, 9.0])
        np.testing.assert_array_equal(m.zeta, [0.1, 0.2, 0.3])
        # shape columns follow their modes
        np.testing.assert_array_equal(m.mode_shapes, np.eye(3)[:, [1, 2, 0]])

    def test_sign_convention(self):
        m = ModalModel(
            omega2=[4.0], zeta=[0.1], mode_shapes=[[-1.0], [-3.0]],
            input_gains=[[2.0, -1.0]], sensor_coords=np.zeros((2, 2)),
        )
        assert m.mode_shapes[np.argmax(np.abs(m.mode_shapes[:, 0])), 0] > 0
        # rank-one product preserved
        np.testing.assert_allclose(
            m.mode_shapes @ m.input_gains, np.array([[-1.0], [-3.0]]) @ np.array([[2.0, -1.0]])
        )

    def test_rigid_count_must_match(self):
        with pytest.raises(ValidationError):
            ModalModel(
                omega2=[0.0, 4.0], zeta=[0.0, 0.1], mode_shapes=np.ones((1, 2)),
                input_gains=np.ones((2, 1)), sensor_coords=np.zeros((1, 2)), n_rigid=0,
            )

    def test_zero_flexible_shape_column_rejected(self):
        with pytest.raises(ValidationError):
            ModalModel(
                omega2=[4.0], zeta=[0.1], mode_shapes=[[0.0]],
                input_gains=[[1.0]], sensor_coords=np.zeros((1, 2)),
            )


class TestSchedule:
    def test_zero_shift(self):
        s = ScheduleMap(offsets=[[0.1, -0.2], [0.0, 0.3]])
        out = apply_schedule(s, [[0.0, 0.0]])
        np.testing.assert_array_equal(out[:, 0, :], s.offsets)

    def test_simple_addition(self):
        s = ScheduleMap(offsets=[[0.1, 0.0]])
        out = apply_schedule(s, [[0.05, -0.02]])
        np.testing.assert_array_equal(out[0, 0], [0.1 + 0.05, -0.02])
        assert out[0, 0, 0] == pytest.approx(0.15)

    def test_ramp_trajectory_pointwise(self, rng):
        offsets = rng.uniform(-0.1, 0.1, (5, 2))
        t = np.linspace(0, 1, 50)
        ramp = np.column_stack([np.minimum(t, 0.5), 0.2 * t])
        got = apply_schedule(ScheduleMap(offsets=offsets), ramp)
        for y in range(5):
            for i in range(len(t)):
                np.testing.assert_array_equal(got[y, i], offsets[y] + ramp[i])


def _pdm_from_model(model, lam=0.0):
    surfaces = [
        fit_tps(model.sensor_coords, model.mode_shapes[:, i], lam)
        for i in range(model.n_modes)
    ]
    c = model.sensor_coords
    domain = (c[:, 0].min(), c[:, 0].max(), c[:, 1].min(), c[:, 1].max())
    return PositionDependentModel(
        omega2=model.omega2, zeta=model.zeta, input_gains=model.input_gains,
        surfaces=surfaces, domain=domain, n_rigid=model.n_rigid,
    )


class TestEvalAtPosition:
    def test_matches_sensor_row_with_interpolating_surfaces(self, rng):
        m = random_modal_model(rng, n_outputs=8, n_flex=2)
        pdm = _pdm_from_model(m, lam=0.0)
        w = np.logspace(1, 3, 12)
        full = frf_eval(m, w)
        for j in (0, 3, 7):
            row = eval_at_position(pdm, m.sensor_coords[j], w)
            np.testing.assert_allclose(row[0], full[j], rtol=1e-8)

    def test_constant_surfaces_position_independent(self, rng):
        m = ModalModel(
            omega2=[100.0], zeta=[1.0], mode_shapes=np.ones((6, 1)),
            input_gains=[[1.0, 2.0]],
            sensor_coords=np.column_stack([np.linspace(0, 1, 6), np.linspace(0, 1, 6) ** 2]),
        )
        pdm = _pdm_from_model(m, lam=0.0)
        w = np.logspace(0, 2, 8)
        a = eval_at_position(pdm, (0.2, 0.3), w)
        b = eval_at_position(pdm, (0.8, 0.1), w)
        np.testing.assert_allclose(a, b, rtol=1e-9)

    def test_analytic_shape_oracle_at_midpoint(self):
        # shapes z1 = x + y, z2 = x*y on a grid; TPS reproduces first-degree
        # polynomials exactly and x*y closely on dense samples
        gx, gy = np.meshgrid(np.linspace(0, 1, 6), np.linspace(0, 1, 6))
        coords = np.column_stack([gx.ravel(), gy.ravel()])
        shapes = np.column_stack([coords.sum(axis=1), coords.prod(axis=1)])
        m = ModalModel(
            omega2=[100.0, 400.0], zeta=[1.0, 2.0], mode_shapes=shapes,
            input_gains=np.ones((2, 3)), sensor_coords=coords,
        )
        pdm = _pdm_from_model(m, lam=0.0)
        w = np.logspace(0, 2, 10)
        coord = (0.45, 0.55)
        want_row = np.array([coord[0] + coord[1], coord[0] * coord[1]])
        den = -(w**2) + 1j * w * m.zeta[:, None] + m.omega2[:, None]
        want = np.einsum("i,ik,il->kl", want_row, m.input_gains, 1.0 / den)
        got = eval_at_position(pdm, coord, w)
        np.testing.assert_allclose(got[0], want, rtol=2e-3)

    def test_extrapolation_warns(self, rng):
        m = random_modal_model(rng, n_outputs=6, n_flex=1)
        pdm = _pdm_from_model(m)
        with pytest.warns(UserWarning, match="outside"):
            eval_at_position(pdm, (5.0, 5.0), [10.0])

    def test_surface_count_must_match_modes(self, rng):
        m = random_modal_model(rng, n_outputs=6, n_flex=2)
        surfaces = [fit_tps(m.sensor_coords, m.mode_shapes[:, 0], 0.0)]
        with pytest.raises(ValidationError):
            PositionDependentModel(
                omega2=m.omega2, zeta=m.zeta, input_gains=m.input_gains,
                surfaces=surfaces, domain=(-1, 1, -1, 1), n_rigid=0,
            )
