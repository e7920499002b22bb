"""Transform an identified fraction description into a modally damped model.

The chain is: compute the denominator poles from a block-companion pencil,
pair them into real second-order sections s^2 + zeta s + omega^2, prune
sections that carry no cost (computational modes), refit real residue
matrices with the denominators held fixed, and split every residue into a
rank-one shape/gain product through its singular value decomposition.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericalError, ValidationError
from .frf import FrfDataset
from .lmfd import LmfdModel
from .modal import ModalModel
from .solver import WeightingSpec
from .textio import write_table

_CONJ_CLOSE_REL = 1e-8
_PAIR_MATCH_REL = 1e-6


def poles_of(model: LmfdModel) -> np.ndarray:
    """All 2 n_modes poles: flexible ones from det D(s) = 0 plus the
    structural double poles at the origin.

    The flexible part is solved as a generalized eigenvalue problem of the
    block-companion linearization of D, with the frequency variable scaled
    to the grid's geometric mean so the pencil is well balanced.
    """
    st = model.structure
    rigid = np.zeros(2 * st.n_rigid, dtype=complex)
    delta = st.max_degree
    if delta == 0:
        return rigid
    alpha = float(np.exp(np.mean(np.log(np.abs(model.basis.s)))))
    A = model.denominator_monomial()
    A = [A[d] * alpha**d for d in range(delta + 1)]  # D in z = s / alpha

    p = st.p
    n = p * delta
    E = np.eye(n)
    E[-p:, -p:] = A[delta]
    F = np.zeros((n, n))
    for b in range(delta - 1):
        F[b * p:(b + 1) * p, (b + 1) * p:(b + 2) * p] = np.eye(p)
    for d in range(delta):
        F[-p:, d * p:(d + 1) * p] = -A[d]
    try:
        eigvals = scipy.linalg.eig(F, E, right=False)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise NumericalError(
            "companion pencil is singular; check the degree structure") from exc
    finite = eigvals[np.isfinite(eigvals)]
    if finite.size != st.flex_degree:
        raise NumericalError(
            f"expected {st.flex_degree} finite poles, found {finite.size}; "
            "check the degree structure")
    poles = alpha * finite
    scale = np.abs(poles).max() if poles.size else 1.0
    # real coefficients force conjugate closure; verify numerically
    remaining = list(poles)
    for z in poles:
        if abs(z.imag) <= _CONJ_CLOSE_REL * scale:
            continue
        match = min(remaining, key=lambda w: abs(np.conj(z) - w))
        if abs(np.conj(z) - match) > 1e-6 * scale:
            raise NumericalError("pole set is not conjugate-closed")
    return np.concatenate([rigid, poles])


def pair_poles(poles) -> list:
    """Group poles into real second-order sections.

    Complex poles pair with their conjugates; leftover real poles pair
    greedily by ascending value (warned, the ambiguity only matters for
    heavily damped fits).  Each pair (p1, p2) maps to
    zeta = -(p1 + p2), omega^2 = p1 p2, both real.
    """
    poles = np.asarray(poles, dtype=complex).ravel()
    if poles.size % 2:
        raise ValidationError("pole count must be even")
    if poles.size == 0:
        return []
    scale = max(np.abs(poles).max(), 1e-30)
    tol = _PAIR_MATCH_REL * scale

    real = [z.real for z in poles if abs(z.imag) <= tol]
    upper = [z for z in poles if z.imag > tol]
    lower = [z for z in poles if z.imag < -tol]
    pairs = []
    for z in upper:
        if not lower:
            raise ValidationError("unpaired complex pole after conjugate matching")
        dist = [abs(np.conj(z) - w) for w in lower]
        kbest = int(np.argmin(dist))
        if dist[kbest] > tol:
            raise ValidationError(
                f"complex pole {z:.6g} has no conjugate partner within tolerance")
        w = lower.pop(kbest)
        pairs.append((float(-(z + w).real), float((z * w).real)))
    if lower:
        raise ValidationError("unpaired complex pole after conjugate matching")

    n_real_flex = sum(1 for r in real if abs(r) > tol)
    if n_real_flex > 2:
        warnings.warn(f"{n_real_flex} real flexible poles paired greedily by "
                      "ascending value", stacklevel=2)
    real.sort()
    for a in range(0, len(real), 2):
        p1, p2 = real[a], real[a + 1]
        pairs.append((float(-(p1 + p2)), float(p1 * p2)))
    pairs.sort(key=lambda t: (t[1], t[0]))
    return pairs


def _is_rigid(pair) -> bool:
    return pair[0] == 0.0 and pair[1] == 0.0


def dedupe_pairs(pairs) -> list:
    """Collapse the identical rigid sections into one 1/s^2 denominator."""
    out = []
    seen_rigid = False
    for pair in sorted(pairs, key=lambda t: (t[1], t[0])):
        if _is_rigid(pair):
            if not seen_rigid:
                out.append((0.0, 0.0))
                seen_rigid = True
        else:
            out.append(pair)
    return out


def _section_basis(pairs, omega) -> np.ndarray:
    s = 1j * np.asarray(omega, dtype=float)
    B = np.empty((len(pairs), s.size), dtype=complex)
    for g, (zeta, omega2) in enumerate(pairs):
        B[g] = 1.0 / (s**2 + zeta * s + omega2)
    return B


def fit_residues(frf: FrfDataset, pairs, weighting: WeightingSpec):
    """Weighted linear fit of real residue matrices with fixed denominators.

    Identical rigid sections are merged into a single 1/s^2 term first (they
    are indistinguishable in the sum); the returned residues align with the
    deduplicated section list, which is the first return value.
    """
    groups = dedupe_pairs(pairs)
    if not groups:
        raise ValidationError("no sections to fit")
    B = _section_basis(groups, frf.omega)           # G x m
    Bn = B / np.linalg.norm(B, axis=1, keepdims=True)
    lifted = np.concatenate([Bn.T.real, Bn.T.imag], axis=0)   # 2m x G
    gram_cond = np.linalg.cond(lifted) ** 2
    if gram_cond > 1e12:
        worst = _closest_pair_note(groups)
        raise NumericalError(
            f"section Gram nearly singular (condition {gram_cond:.3e}); {worst}")
    m = frf.n_points
    residues = np.empty((len(groups), frf.n_outputs, frf.n_inputs))
    for i in range(frf.n_outputs):
        for j in range(frf.n_inputs):
            w = weighting.values[:, i, j]
            A_c = (w[None, :] * B).T                 # m x G
            b_c = w * frf.response[:, i, j]
            A = np.vstack([A_c.real, A_c.imag])
            b = np.concatenate([b_c.real, b_c.imag])
            sol, *_ = np.linalg.lstsq(A, b, rcond=None)
            residues[:, i, j] = sol
    return groups, residues


def _closest_pair_note(groups) -> str:
    # near-duplicate sections are the usual culprit for a collinear basis
    if len(groups) < 2:
        return "single section"
    best = None
    for a in range(len(groups)):
        for b in range(a + 1, len(groups)):
            d = np.hypot(groups[a][0] - groups[b][0], groups[a][1] - groups[b][1])
            sc = max(abs(groups[a][1]), abs(groups[b][1]), 1.0)
            if best is None or d / sc < best[0]:
                best = (d / sc, a, b)
    return (f"closest sections are {best[1]} and {best[2]} "
            f"(normalized distance {best[0]:.3e})")


def _fit_cost(frf, groups, weighting) -> float:
    _, residues = fit_residues(frf, groups, weighting)
    B = _section_basis(groups, frf.omega)
    model = np.einsum("gij,gk->kij", residues, B)
    r = weighting.values * (frf.response - model)
    return float(np.sum(r.real**2 + r.imag**2))


def prune_computational_modes(pairs, frf: FrfDataset, weighting: WeightingSpec,
                              rho_keep: float = 0.01):
    """Keep sections whose removal degrades the refit cost by more than
    rho_keep (relative); rigid sections always stay.

    Sections a modally damped model cannot represent (negative damping or
    nonpositive squared frequency) are computational by definition and are
    dropped no matter what they contribute.  Returns (retained pairs, table
    rows); the table ranks every flexible section by cost contribution so a
    human can override the automatic rule.  Rows hold (frequency Hz,
    damping ratio, cost contribution, admissible, retained).
    """
    groups = dedupe_pairs(pairs)
    flex = [g for g in groups if not _is_rigid(g)]
    rigid = [g for g in groups if _is_rigid(g)]
    if not flex:
        return list(pairs), []
    admissible = [g[0] >= 0.0 and g[1] > 0.0 for g in flex]
    kept_all = rigid + [g for g, adm in zip(flex, admissible) if adm]
    V_full = _fit_cost(frf, kept_all, weighting)
    data_scale = float(np.sum((weighting.values * np.abs(frf.response)) ** 2))
    floor = max(V_full, 1e-30 * data_scale)
    rows = []
    retained_flex = []
    for g, adm in zip(flex, admissible):
        if adm:
            others = rigid + [h for h, a in zip(flex, admissible)
                              if a and h is not g]
            V_minus = _fit_cost(frf, others, weighting) if others else data_scale
            contribution = (V_minus - V_full) / floor
            keep = contribution > rho_keep
        else:
            others = kept_all + [g]
            V_minus = _fit_cost(frf, others, weighting)
            contribution = (V_full - V_minus) / floor  # what keeping it would buy
            keep = False
        omega2 = g[1]
        freq_hz = np.sqrt(max(omega2, 0.0)) / (2 * np.pi)
        ratio = g[0] / (2 * np.sqrt(omega2)) if omega2 > 0 else np.inf
        rows.append([freq_hz, ratio, contribution, int(adm), int(keep)])
        if keep:
            retained_flex.append(g)
    order = np.argsort([-r[2] for r in rows])
    rows = [rows[i] for i in order]
    # restore the multiplicity of rigid sections from the input
    n_rigid_in = sum(1 for p in pairs if _is_rigid(p))
    retained = [(0.0, 0.0)] * n_rigid_in + retained_flex
    retained.sort(key=lambda t: (t[1], t[0]))
    return retained, rows


def write_prune_table(path, rows):
    write_table(path, ["freq_hz", "damping_ratio", "cost_contribution", "admissible",
                       "retained"], rows)


def rank1_factor(residue):
    """Best rank-one split of a residue matrix.

    Returns (shape column carrying sigma_1, gain row, defect sigma_2/sigma_1).
    The sign convention puts the largest-magnitude shape entry positive.
    """
    R = np.atleast_2d(np.asarray(residue, dtype=float))
    if not R.any():
        raise ValidationError("zero residue matrix cannot be factored")
    U, S, Vh = np.linalg.svd(R)
    shape = U[:, 0] * S[0]
    gains = Vh[0, :]
    if shape[np.argmax(np.abs(shape))] < 0:
        shape = -shape
        gains = -gains
    defect = float(S[1] / S[0]) if S.size > 1 else 0.0
    return shape, gains, defect


@dataclass
class TransformInfo:
    """Diagnostics of the fraction-to-modal transformation."""

    prune_table: list
    rank1_defects: np.ndarray
    residue_fit_cost: float
    rank1_cost: float

    @property
    def rank1_excess(self) -> float:
        """delta such that the rank-one model cost is (1 + delta) of the
        full-residue fit."""
        if self.residue_fit_cost == 0.0:
            return 0.0
        return self.rank1_cost / self.residue_fit_cost - 1.0


def lmfd_to_modal(model: LmfdModel, frf: FrfDataset, weighting: WeightingSpec,
                  sensor_coords, rho_keep: float = 0.01, prune: bool = True):
    """Full transformation: poles, pairing, pruning, residue fit, rank-one
    factorization.  Returns (ModalModel, TransformInfo).

    The merged rigid residue is split into n_rigid rank-one modes through
    its leading singular triplets.
    """
    st = model.structure
    pairs = pair_poles(poles_of(model))
    if prune:
        pairs, table = prune_computational_modes(pairs, frf, weighting, rho_keep)
    else:
        table = []
    groups, residues = fit_residues(frf, pairs, weighting)

    shapes_cols = []
    gain_rows = []
    omega2 = []
    zeta = []
    defects = []
    for g, (zg, w2g) in enumerate(groups):
        if _is_rigid((zg, w2g)) and st.n_rigid > 0:
            U, S, Vh = np.linalg.svd(residues[g])
            if S.size < st.n_rigid or S[st.n_rigid - 1] == 0.0:
                raise NumericalError(
                    f"rigid residue block supports fewer than {st.n_rigid} modes")
            for l in range(st.n_rigid):
                col = U[:, l] * S[l]
                row = Vh[l, :]
                if col[np.argmax(np.abs(col))] < 0:
                    col, row = -col, -row
                shapes_cols.append(col)
                gain_rows.append(row)
                omega2.append(0.0)
                zeta.append(0.0)
                defects.append(S[st.n_rigid] / S[0] if S.size > st.n_rigid else 0.0)
        else:
            col, row, defect = rank1_factor(residues[g])
            shapes_cols.append(col)
            gain_rows.append(row)
            omega2.append(w2g)
            zeta.append(zg)
            defects.append(defect)

    modal = ModalModel(
        omega2=np.asarray(omega2), zeta=np.asarray(zeta),
        mode_shapes=np.column_stack(shapes_cols),
        input_gains=np.vstack(gain_rows),
        sensor_coords=sensor_coords,
        n_rigid=st.n_rigid,
    )
    B = _section_basis(groups, frf.omega)
    full_model = np.einsum("gij,gk->kij", residues, B)
    r_full = weighting.values * (frf.response - full_model)
    den = modal.omega2[:, None] + modal.zeta[:, None] * (1j * frf.omega)[None, :] \
        + ((1j * frf.omega) ** 2)[None, :]
    rank1_model = np.einsum("ji,ik,il->ljk", modal.mode_shapes, modal.input_gains,
                            1.0 / den)
    r_r1 = weighting.values * (frf.response - rank1_model)
    info = TransformInfo(
        prune_table=table,
        rank1_defects=np.asarray(defects),
        residue_fit_cost=float(np.sum(r_full.real**2 + r_full.imag**2)),
        rank1_cost=float(np.sum(r_r1.real**2 + r_r1.imag**2)),
    )
    return modal, info
