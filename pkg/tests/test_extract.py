import numpy as np
import pytest

from flexmodal.errors import NumericalError, ValidationError
from flexmodal.extract import (
    dedupe_pairs, fit_residues, lmfd_to_modal, pair_poles, poles_of,
    prune_computational_modes, rank1_factor,
)
from flexmodal.frf import FrfDataset
from flexmodal.lmfd import build_orthonormal_basis, build_structure, theta_from_monomial, LmfdModel
from flexmodal.modal import ModalModel, frf_eval
from flexmodal.solver import WeightingSpec

from conftest import random_modal_model


def dataset_of(model, omega):
    G = np.transpose(frf_eval(model, omega), (2, 0, 1))
    return FrfDataset(
        omega=omega, response=G, variance=np.zeros_like(G, dtype=float),
        output_labels=[f"z{i:02d}" for i in range(model.n_outputs)],
        input_labels=[f"u_nc:{j}" for j in range(model.n_inputs)],
    )


def uniform_weight(ds):
    return WeightingSpec(values=np.ones(ds.response.shape), w_max=np.inf)


class TestPoles:
    def test_scalar_quadratic(self):
        st = build_structure(p=1, q=1, n_m=1, n_rb=0)
        basis = build_orthonormal_basis(st, np.logspace(-0.5, 0.7, 30), np.ones(30))
        theta = theta_from_monomial(st, basis, D_mono=[[[2.0, 3.0, 1.0]]],
                                    N_mono=[[[1.0]]])
        model = LmfdModel(st, basis, theta)
        poles = np.sort_complex(poles_of(model))
        np.testing.assert_allclose(poles, [-2.0, -1.0], atol=1e-9)

    def test_block_diagonal_union_of_quadratics(self):
        st = build_structure(p=2, q=1, n_m=2, n_rb=0)
        basis = build_orthonormal_basis(st, np.logspace(0, 1.5, 40), np.ones(40))
        quads = [(3.0, 2.0), (8.0, 41.0)]  # (zeta, omega2): roots -1,-2 and -4±5j
        D = np.zeros((2, 2, 3))
        for i, (z, w2) in enumerate(quads):
            D[i, i] = [w2, z, 1.0]
        N = np.zeros((2, 1, 1))
        N[:, 0, 0] = 1.0
        model = LmfdModel(st, basis, theta_from_monomial(st, basis, D, N))
        poles = poles_of(model)
        want = np.array([-1.0, -2.0, -4 + 5j, -4 - 5j])
        got = np.sort_complex(poles)
        np.testing.assert_allclose(got, np.sort_complex(want), atol=1e-8)

    def test_rigid_zeros_appended(self, rng):
        st = build_structure(p=2, q=2, n_m=3, n_rb=1)
        basis = build_orthonormal_basis(st, np.logspace(0, 1.5, 50), np.ones(50))
        theta = 0.3 * rng.standard_normal(st.n_theta)
        poles = poles_of(LmfdModel(st, basis, theta))
        assert poles.size == 2 * st.n_modes
        assert np.sum(poles == 0.0) == 2

    def test_determinant_residual_at_poles(self, rng):
        st = build_structure(p=2, q=2, n_m=4, n_rb=0)
        basis = build_orthonormal_basis(st, np.logspace(0, 1.5, 60), np.ones(60))
        theta = 0.4 * rng.standard_normal(st.n_theta)
        model = LmfdModel(st, basis, theta)
        poles = poles_of(model)
        for z in poles:
            D, _ = model.d_n_at(model.basis.eval(np.array([z])))
            # Hadamard bound as the determinant scale
            scale = np.prod(np.linalg.norm(D[0], axis=1))
            assert abs(np.linalg.det(D[0])) < 1e-6 * max(scale, 1e-30)


class TestPairPoles:
    def test_conjugate_pair(self):
        pairs = pair_poles([-1 + 2j, -1 - 2j])
        assert pairs == [(2.0, 5.0)]

    def test_rigid_zeros(self):
        assert pair_poles([0.0, 0.0]) == [(0.0, 0.0)]

    def test_perturbed_conjugate_pair(self):
        z = -3.0 + 40.0j
        eps = 1e-9
        pairs = pair_poles([z, np.conj(z) + eps * 1j])
        assert len(pairs) == 1
        zeta, omega2 = pairs[0]
        assert zeta == pytest.approx(6.0, abs=1e-7)
        assert omega2 == pytest.approx(9.0 + 1600.0, rel=1e-8)

    def test_real_poles_paired_ascending(self):
        with pytest.warns(UserWarning, match="real flexible"):
            pairs = pair_poles([-4.0, -1.0, -3.0, -2.0])
        # pairs come back in modal order (ascending omega^2)
        assert pairs == [(3.0, 2.0), (7.0, 12.0)]

    def test_odd_count_rejected(self):
        with pytest.raises(ValidationError):
            pair_poles([-1.0, -2.0, -3.0])

    def test_unmatched_complex_rejected(self):
        with pytest.raises(ValidationError):
            pair_poles([-1 + 2j, -1 + 3j])

    def test_sections_have_input_poles_as_roots(self, rng):
        z = rng.standard_normal(3) * 10 - 20 + 1j * np.abs(rng.standard_normal(3)) * 30
        poles = np.concatenate([z, np.conj(z)])
        pairs = pair_poles(poles)
        roots = np.concatenate([np.roots([1.0, zt, w2]) for zt, w2 in pairs])
        np.testing.assert_allclose(np.sort_complex(roots), np.sort_complex(poles),
                                   rtol=1e-12, atol=1e-9)


class TestFitResidues:
    def test_exact_recovery(self, rng):
        model = random_modal_model(rng, n_outputs=3, n_inputs=2, n_flex=3, n_rigid=0)
        omega = np.logspace(1.8, 3.9, 120)
        ds = dataset_of(model, omega)
        pairs = [(model.zeta[i], model.omega2[i]) for i in range(model.n_modes)]
        groups, residues = fit_residues(ds, pairs, uniform_weight(ds))
        for g, (zeta, omega2) in enumerate(groups):
            i = int(np.argmin(np.abs(model.omega2 - omega2)))
            want = np.outer(model.mode_shapes[:, i], model.input_gains[i, :])
            np.testing.assert_allclose(residues[g], want, rtol=1e-8,
                                       atol=1e-8 * np.abs(want).max())

    def test_rigid_group_recovers_joint_residue(self, rng):
        model = random_modal_model(rng, n_outputs=4, n_inputs=3, n_flex=2, n_rigid=3)
        omega = np.logspace(0.5, 3.5, 150)
        ds = dataset_of(model, omega)
        pairs = [(model.zeta[i], model.omega2[i]) for i in range(model.n_modes)]
        groups, residues = fit_residues(ds, pairs, uniform_weight(ds))
        assert len(groups) == 3  # one rigid group + two flexible sections
        rigid = model.mode_shapes[:, :3] @ model.input_gains[:3, :]
        np.testing.assert_allclose(residues[0], rigid, rtol=1e-8)

    def test_single_section_closed_form(self):
        # one section, unit weight: LS projection equals the hand-computed
        # normal-equation solution
        omega = np.linspace(1.0, 5.0, 9)
        s = 1j * omega
        b = 1.0 / (s**2 + 2.0 * s + 30.0)
        data = (1.7 * b + 0.1)[:, None, None]  # slight model mismatch
        ds = FrfDataset(omega=omega, response=data,
                        variance=np.zeros_like(data, dtype=float),
                        output_labels=["z00"], input_labels=["u_nc:0"])
        groups, residues = fit_residues(ds, [(2.0, 30.0)], uniform_weight(ds))
        lift_b = np.concatenate([b.real, b.imag])
        lift_d = np.concatenate([data[:, 0, 0].real, data[:, 0, 0].imag])
        want = np.dot(lift_b, lift_d) / np.dot(lift_b, lift_b)
        assert residues[0, 0, 0] == pytest.approx(want, rel=1e-12)

    def test_near_duplicate_sections_rejected(self, rng):
        omega = np.logspace(0, 2, 40)
        ds = FrfDataset(
            omega=omega,
            response=np.ones((40, 1, 1), dtype=complex),
            variance=np.zeros((40, 1, 1)),
            output_labels=["z00"], input_labels=["u_nc:0"])
        pairs = [(2.0, 900.0), (2.0 + 1e-13, 900.0 + 1e-10)]
        with pytest.raises(NumericalError, match="sections"):
            fit_residues(ds, pairs, uniform_weight(ds))


class TestPrune:
    def make_overfit_pairs(self, model, junk):
        pairs = [(model.zeta[i], model.omega2[i]) for i in range(model.n_modes)]
        return pairs + junk

    def test_zero_contribution_pruned(self, rng):
        model = random_modal_model(rng, n_flex=3, n_rigid=0)
        omega = np.logspace(1.8, 3.9, 100)
        ds = dataset_of(model, omega)
        junk = [(50.0, (2 * np.pi * 30.0) ** 2)]
        retained, table = prune_computational_modes(
            self.make_overfit_pairs(model, junk), ds, uniform_weight(ds))
        assert len(retained) == 3
        got = sorted(w2 for _, w2 in retained)
        np.testing.assert_allclose(got, np.sort(model.omega2), rtol=1e-12)

    def test_true_sections_survive_a_decade_of_thresholds(self, rng):
        model = random_modal_model(rng, n_outputs=3, n_inputs=2, n_flex=4, n_rigid=0)
        omega = np.logspace(1.8, 3.9, 120)
        ds = dataset_of(model, omega)
        junk = [(30.0, (2 * np.pi * 55.0) ** 2), (500.0, (2 * np.pi * 300.0) ** 2)]
        pairs = self.make_overfit_pairs(model, junk)
        for rho in (0.003, 0.01, 0.03):
            retained, _ = prune_computational_modes(pairs, ds, uniform_weight(ds),
                                                    rho_keep=rho)
            assert len(retained) == 4
            np.testing.assert_allclose(sorted(w2 for _, w2 in retained),
                                       np.sort(model.omega2), rtol=1e-12)

    def test_all_significant_no_op(self, rng):
        model = random_modal_model(rng, n_flex=3, n_rigid=0)
        omega = np.logspace(1.8, 3.9, 100)
        ds = dataset_of(model, omega)
        pairs = [(model.zeta[i], model.omega2[i]) for i in range(model.n_modes)]
        retained, table = prune_computational_modes(pairs, ds, uniform_weight(ds))
        assert sorted(retained) == sorted(pairs)
        assert all(row[4] == 1 for row in table)  # every section retained

    def test_inadmissible_sections_always_dropped(self, rng):
        model = random_modal_model(rng, n_flex=2, n_rigid=0)
        omega = np.logspace(1.8, 3.9, 100)
        ds = dataset_of(model, omega)
        pairs = [(model.zeta[i], model.omega2[i]) for i in range(2)]
        bad = (-5.0, (2 * np.pi * 150.0) ** 2)  # negative damping
        retained, table = prune_computational_modes(pairs + [bad], ds,
                                                    uniform_weight(ds))
        assert bad not in retained
        assert len(retained) == 2
        flagged = [r for r in table if r[3] == 0]
        assert len(flagged) == 1 and flagged[0][4] == 0

    def test_rigid_sections_always_kept(self, rng):
        model = random_modal_model(rng, n_outputs=4, n_flex=2, n_rigid=3)
        omega = np.logspace(0.5, 3.5, 120)
        ds = dataset_of(model, omega)
        pairs = [(model.zeta[i], model.omega2[i]) for i in range(model.n_modes)]
        retained, _ = prune_computational_modes(pairs, ds, uniform_weight(ds))
        assert sum(1 for p in retained if p == (0.0, 0.0)) == 3


class TestRank1:
    def test_exact_rank_one_input(self, rng):
        u = rng.standard_normal(5)
        v = rng.standard_normal(3)
        shape, gains, defect = rank1_factor(np.outer(u, v))
        assert defect < 1e-12
        np.testing.assert_allclose(np.outer(shape, gains), np.outer(u, v),
                                   rtol=1e-10, atol=1e-12)
        assert shape[np.argmax(np.abs(shape))] > 0

    def test_diagonal_matrix(self):
        shape, gains, defect = rank1_factor(np.diag([1.0, 0.1]))
        np.testing.assert_allclose(shape, [1.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(gains, [1.0, 0.0], atol=1e-12)
        assert defect == pytest.approx(0.1)

    def test_frobenius_identity(self, rng):
        R = rng.standard_normal((4, 6))
        shape, gains, defect = rank1_factor(R)
        sv = np.linalg.svd(R, compute_uv=False)
        err = np.linalg.norm(R - np.outer(shape, gains))
        assert err == pytest.approx(np.sqrt(np.sum(sv[1:] ** 2)), rel=1e-12)

    def test_zero_matrix_rejected(self):
        with pytest.raises(ValidationError):
            rank1_factor(np.zeros((2, 2)))

    def test_sign_stable_across_runs(self, rng):
        R = np.outer([-2.0, 1.0], [3.0, -1.0])
        a = rank1_factor(R)
        b = rank1_factor(R.copy())
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestRoundTrip:
    def test_modal_to_frf_to_modal(self, rng):
        # modal model -> response grid -> residue fit with true sections ->
        # rank-one split reproduces shapes and gains up to the stored sign
        # convention
        model = random_modal_model(rng, n_outputs=5, n_inputs=3, n_flex=4, n_rigid=0)
        omega = np.logspace(1.8, 3.9, 150)
        ds = dataset_of(model, omega)
        pairs = [(model.zeta[i], model.omega2[i]) for i in range(model.n_modes)]
        groups, residues = fit_residues(ds, pairs, uniform_weight(ds))
        for g, (zeta, omega2) in enumerate(groups):
            i = int(np.argmin(np.abs(model.omega2 - omega2)))
            shape, gains, defect = rank1_factor(residues[g])
            # the split carries sigma_1 in the shape column and a unit-norm
            # gain row; rescale the truth the same way before comparing
            gnorm = np.linalg.norm(model.input_gains[i])
            np.testing.assert_allclose(shape, model.mode_shapes[:, i] * gnorm,
                                       rtol=1e-7,
                                       atol=1e-7 * gnorm * np.abs(model.mode_shapes).max())
            np.testing.assert_allclose(gains * gnorm, model.input_gains[i],
                                       rtol=1e-7, atol=1e-9)
            assert defect < 1e-7

    def test_dedupe(self):
        pairs = [(0.0, 0.0), (0.0, 0.0), (1.0, 4.0)]
        assert dedupe_pairs(pairs) == [(0.0, 0.0), (1.0, 4.0)]
