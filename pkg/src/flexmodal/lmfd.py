"""Structured left matrix fraction description G = D(s)^-1 N(s) + R0 / s^2.

Structure constraints (all enforced by construction):

* even McMillan degree 2 * n_modes;
* relative degree 2: numerator rows run two degrees below their denominator
  row;
* a prescribed rigid-body mode count: the flexible fraction carries degree
  2 * (n_modes - n_rigid) and a separate residue block R0 / s^2 supplies the
  2 * n_rigid poles at the origin.

Row degrees are quasi-constant (they differ by at most one), the diagonal
denominator entries are pinned to the orthonormal polynomial of their row
degree (the identifiability normalization; equivalent to a monic diagonal
up to the irrelevant row scaling of [D N]), and off-diagonal denominator
degrees stay strictly below the diagonal degree of their column.

Polynomial coefficients are expressed in an orthonormal basis built on the
measurement grid with a scalar per-frequency weight; that basis is what
keeps high-degree regression matrices well conditioned where raw monomials
are hopeless.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .textio import read_kv_file, write_kv_file

_BREAKDOWN_REL = 1e-13


@dataclass(frozen=True)
class Slot:
    """One free polynomial coefficient: matrix entry plus basis degree."""

    kind: str     # "D" | "N"
    row: int
    col: int
    degree: int


@dataclass(frozen=True)
class LmfdStructure:
    p: int
    q: int
    n_modes: int
    n_rigid: int
    row_degrees: tuple

    def __post_init__(self):
        if self.p < 1 or self.q < 1:
            raise ValidationError("need at least one output and one input")
        if not 0 <= self.n_rigid <= self.n_modes:
            raise ValidationError("need 0 <= n_rigid <= n_modes")
        if len(self.row_degrees) != self.p:
            raise ValidationError("row degree list must have one entry per output")
        if sum(self.row_degrees) != self.flex_degree:
            raise ValidationError("row degrees must sum to the flexible-part degree")
        if max(self.row_degrees) - min(self.row_degrees) > 1:
            raise ValidationError("row degrees must be quasi-constant (differ by <= 1)")

    @property
    def mcmillan_degree(self) -> int:
        return 2 * self.n_modes

    @property
    def flex_degree(self) -> int:
        return self.mcmillan_degree - 2 * self.n_rigid

    @property
    def max_degree(self) -> int:
        return max(self.row_degrees)

    def numerator_degree(self, row: int) -> int:
        return self.row_degrees[row] - 2

    def off_diagonal_degree(self, row: int, col: int) -> int:
        # capped by both row degrees and strictly below the column diagonal
        return min(self.row_degrees[row], self.row_degrees[col] - 1)

    def slots(self):
        """Free coefficients in canonical theta order (D row-major, then N,
        then the rigid residue block handled separately)."""
        out = []
        for i in range(self.p):
            for j in range(self.p):
                cap = self.row_degrees[i] - 1 if i == j else self.off_diagonal_degree(i, j)
                for d in range(cap + 1):
                    out.append(Slot("D", i, j, d))
        for i in range(self.p):
            for j in range(self.q):
                for d in range(self.numerator_degree(i) + 1):
                    out.append(Slot("N", i, j, d))
        return out

    @property
    def n_rigid_params(self) -> int:
        return self.p * self.q if self.n_rigid > 0 else 0

    @property
    def n_theta(self) -> int:
        return len(self.slots()) + self.n_rigid_params


def build_structure(p: int, q: int, n_m: int, n_rb: int) -> LmfdStructure:
    """Assign quasi-constant row degrees for the flexible denominator.

    The first (flex_degree mod p) rows get the extra degree.
    """
    if n_rb < 0 or n_m < n_rb:
        raise ValidationError("need 0 <= n_rb <= n_m")
    flex = 2 * (n_m - n_rb)
    base, extra = divmod(flex, p)
    degrees = tuple(base + 1 if i < extra else base for i in range(p))
    return LmfdStructure(p=p, q=q, n_modes=n_m, n_rigid=n_rb, row_degrees=degrees)


# ---------------------------------------------------------------------------
# data-dependent orthonormal polynomial basis

class OrthoBasis:
    """Real-coefficient polynomials orthonormal on the conjugate-closed grid.

    The inner product is sum_k w_k (a(s_k) conj(b(s_k)) + conj(a(s_k)) b(s_k))
    with s_k = j omega_k, i.e. the given grid extended by its mirror image so
    that real coefficients survive the orthogonalization.  Built with a
    Vandermonde-with-Arnoldi sweep; the recurrence is kept so the polynomials
    can be evaluated anywhere, and the monomial expansion is tracked for pole
    computations.
    """

    def __init__(self, omega_grid, weights, max_degree: int):
        omega = np.asarray(omega_grid, dtype=float).ravel()
        w = np.asarray(weights, dtype=float).ravel()
        if omega.size != w.size:
            raise ValidationError("weights must match the frequency grid")
        if omega.size == 0:
            raise ValidationError("empty frequency grid")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise ValidationError("weights must be finite and nonnegative")
        if max_degree + 1 > 2 * np.count_nonzero(w):
            raise NumericalError(
                f"rank deficiency: degree {max_degree} basis needs more than "
                f"{(max_degree + 1) // 2} weighted frequency points")
        self.omega = omega
        self.weights = w
        self.s = 1j * omega
        d1 = max_degree + 1
        V = np.empty((omega.size, d1), dtype=complex)
        H = np.zeros((d1, max(d1 - 1, 1)))
        mono = np.zeros((d1, d1))

        def inner(a, b):
            return 2.0 * float(np.sum(w * (a * np.conj(b)).real))

        norm0 = np.sqrt(inner(np.ones_like(self.s), np.ones_like(self.s)))
        V[:, 0] = 1.0 / norm0
        mono[0, 0] = 1.0 / norm0
        scale0 = None
        for d in range(max_degree):
            v = self.s * V[:, d]
            c = np.zeros(d1)
            c[d + 1] = 1.0  # shift in the monomial tracking
            mcol = np.roll(mono[d], 1)
            mcol[0] = 0.0
            for _ in range(2):  # one reorthogonalization pass
                for j in range(d + 1):
                    h = inner(v, V[:, j])
                    v = v - h * V[:, j]
                    mcol = mcol - h * mono[j]
                    H[j, d] += h
            hn = np.sqrt(inner(v, v))
            if scale0 is None:
                scale0 = hn
            if hn <= _BREAKDOWN_REL * scale0:
                raise NumericalError(
                    f"basis breakdown at degree {d + 1}: grid cannot support it")
            H[d + 1, d] = hn
            V[:, d + 1] = v / hn
            mono[d + 1] = mcol / hn
        self.values = V            # m x (max_degree + 1)
        self.recurrence = H
        self.monomial = mono       # row d: ascending powers of s
        self.max_degree = max_degree

    def gram(self) -> np.ndarray:
        """Discrete Gram matrix; identity up to rounding by construction."""
        Vw = self.values * self.weights[:, None]
        return 2.0 * (self.values.conj().T @ Vw).real.T

    def eval(self, s) -> np.ndarray:
        """Polynomial values at arbitrary complex points, shape (len(s), d+1)."""
        s = np.atleast_1d(np.asarray(s, dtype=complex))
        out = np.empty((s.size, self.max_degree + 1), dtype=complex)
        out[:, 0] = self.monomial[0, 0]
        for d in range(self.max_degree):
            v = s * out[:, d]
            for j in range(d + 1):
                v = v - self.recurrence[j, d] * out[:, j]
            out[:, d + 1] = v / self.recurrence[d + 1, d]
        return out


def aggregate_scalar_weight(weight_matrix) -> np.ndarray:
    """Scalar per-frequency weight: Frobenius norm of the diagonal weight
    block at each frequency.  ``weight_matrix`` is (m, p, q)."""
    w = np.asarray(weight_matrix, dtype=float)
    return np.sqrt((w**2).sum(axis=(1, 2)))


def build_orthonormal_basis(structure: LmfdStructure, omega_grid, scalar_weights,
                            extra_degree: int = 0) -> OrthoBasis:
    """Basis spanning every degree slot of the structure on this grid."""
    return OrthoBasis(omega_grid, scalar_weights, structure.max_degree + extra_degree)


# ---------------------------------------------------------------------------
# the parameterized model

class LmfdModel:
    """Structure + basis + real parameter vector theta.

    theta lays out the free D coefficients row-major, then N, then (when
    rigid-body modes are present) the p*q rigid residue entries.  The pinned
    diagonal coefficients are not part of theta.
    """

    def __init__(self, structure: LmfdStructure, basis: OrthoBasis, theta):
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != structure.n_theta:
            raise ValidationError(
                f"theta has {theta.size} entries, structure needs {structure.n_theta}")
        if basis.max_degree < structure.max_degree:
            raise ValidationError("basis degree too low for this structure")
        self.structure = structure
        self.basis = basis
        self.theta = theta
        self._slots = structure.slots()

    # -- coefficient bookkeeping ------------------------------------------

    def coefficient_arrays(self):
        """(D_coeffs, N_coeffs, R0) in basis coordinates, pinned included.

        D_coeffs is (p, p, dmax+1); N_coeffs is (p, q, dmax+1).
        """
        st = self.structure
        d1 = self.basis.max_degree + 1
        Dc = np.zeros((st.p, st.p, d1))
        Nc = np.zeros((st.p, st.q, d1))
        for value, slot in zip(self.theta, self._slots):
            if slot.kind == "D":
                Dc[slot.row, slot.col, slot.degree] = value
            else:
                Nc[slot.row, slot.col, slot.degree] = value
        for i in range(st.p):
            Dc[i, i, st.row_degrees[i]] = 1.0
        R0 = self.rigid_block()
        return Dc, Nc, R0

    def rigid_block(self) -> np.ndarray:
        st = self.structure
        if st.n_rigid == 0:
            return np.zeros((st.p, st.q))
        return self.theta[-st.p * st.q:].reshape(st.p, st.q)

    # -- evaluation ---------------------------------------------------------

    def d_n_at(self, phi_values) -> tuple:
        """D and N stacks for precomputed basis values (m, dmax+1)."""
        Dc, Nc, _ = self.coefficient_arrays()
        D = np.einsum("ijd,kd->kij", Dc, phi_values)
        N = np.einsum("ijd,kd->kij", Nc, phi_values)
        return D, N

    def eval_grid(self) -> np.ndarray:
        """G at every fit-grid frequency, (m, p, q)."""
        return self._eval(self.basis.values, self.basis.s)

    def eval_at(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=complex))
        return self._eval(self.basis.eval(s), s)

    def _eval(self, phi_values, s):
        D, N = self.d_n_at(phi_values)
        try:
            G = np.linalg.solve(D, N)
        except np.linalg.LinAlgError as exc:
            conds = np.array([np.linalg.cond(Dk) for Dk in D])
            k = int(np.nanargmax(conds))
            raise NumericalError(
                f"singular denominator at s = {s[k]:.6g} "
                f"(condition {conds[k]:.3e})") from exc
        if not np.all(np.isfinite(G)):
            k = int(np.argwhere(~np.isfinite(G))[0][0])
            raise NumericalError(f"singular denominator at s = {s[k]:.6g}")
        if self.structure.n_rigid > 0:
            G = G + self.rigid_block()[None, :, :] / (s**2)[:, None, None]
        return G

    def denominator_monomial(self):
        """Monomial coefficient matrices A_0 .. A_delta of the flexible D(s)."""
        Dc, _, _ = self.coefficient_arrays()
        # entry polynomials: sum_d Dc[i,j,d] * phi_d, phi_d given in monomial rows
        coeffs = np.einsum("ijd,dp->ijp", Dc, self.basis.monomial)
        delta = self.structure.max_degree
        return [coeffs[:, :, power] for power in range(delta + 1)]

    def with_theta(self, theta) -> "LmfdModel":
        return LmfdModel(self.structure, self.basis, theta)


def eval_lmfd(model: LmfdModel, s) -> np.ndarray:
    """Response matrix of the fraction description at arbitrary s values."""
    return model.eval_at(s)


def theta_from_monomial(structure: LmfdStructure, basis: OrthoBasis,
                        D_mono, N_mono, R0=None) -> np.ndarray:
    """Parameter vector reproducing polynomial matrices given in monomial
    coefficients (entry [i, j, power]).  Rows of [D N] are rescaled so the
    pinned diagonal coefficient equals one; that rescaling leaves the
    response invariant."""
    D_mono = np.asarray(D_mono, dtype=float)
    N_mono = np.asarray(N_mono, dtype=float)
    d1 = basis.max_degree + 1
    M = basis.monomial[:d1, :d1]

    def project(poly_powers):
        a = np.zeros(d1)
        a[: len(poly_powers)] = poly_powers
        return np.linalg.solve(M.T, a)

    Dc = np.zeros((structure.p, structure.p, d1))
    Nc = np.zeros((structure.p, structure.q, d1))
    for i in range(structure.p):
        for j in range(structure.p):
            Dc[i, j] = project(D_mono[i, j])
        for j in range(structure.q):
            Nc[i, j] = project(N_mono[i, j])
    theta = []
    scales = np.empty(structure.p)
    for i in range(structure.p):
        pin = Dc[i, i, structure.row_degrees[i]]
        if pin == 0.0:
            raise ValidationError(f"diagonal entry {i} has zero pinned coefficient")
        scales[i] = pin
    for slot in structure.slots():
        block = Dc if slot.kind == "D" else Nc
        theta.append(block[slot.row, slot.col, slot.degree] / scales[slot.row])
    if structure.n_rigid > 0:
        R0 = np.zeros((structure.p, structure.q)) if R0 is None else np.asarray(R0, float)
        theta.extend(R0.ravel())
    return np.asarray(theta)


# ---------------------------------------------------------------------------
# model file

def write_lmfd_file(path, model: LmfdModel):
    st = model.structure
    pairs = [
        ("p", st.p),
        ("q", st.q),
        ("n_m", st.n_modes),
        ("n_rb", st.n_rigid),
        ("row_degrees", list(st.row_degrees)),
        ("basis_omega", model.basis.omega),
        ("basis_weights", model.basis.weights),
        ("basis_degree", model.basis.max_degree),
        ("theta", model.theta),
    ]
    write_kv_file(path, pairs)


def read_lmfd_file(path) -> LmfdModel:
    data = read_kv_file(path)
    required = ["p", "q", "n_m", "n_rb", "row_degrees", "basis_omega",
                "basis_weights", "basis_degree", "theta"]
    missing = [k for k in required if k not in data]
    if missing:
        raise ValidationError(f"LMFD file {path} missing fields: {missing}")
    st = LmfdStructure(p=int(data["p"]), q=int(data["q"]), n_modes=int(data["n_m"]),
                       n_rigid=int(data["n_rb"]), row_degrees=tuple(data["row_degrees"]))
    basis = OrthoBasis(np.asarray(data["basis_omega"], dtype=float),
                       np.asarray(data["basis_weights"], dtype=float),
                       int(data["basis_degree"]))
    return LmfdModel(st, basis, np.asarray(data["theta"], dtype=float))
