"""Weighted least-squares identification: cost, weighting, the iterative
linearized solver and the damped Gauss-Newton refinement.

The cost is V = sum_k || W(k) . (Gdata(k) - Gmodel(k, theta)) ||_F^2 with an
elementwise (diagonal) weight per frequency.  Two parameter sets implement
the model surface: the fraction description (linear in theta up to the
denominator inverse) and the modal form (rational in the pole parameters).

The iterative solver relinearizes the fraction-description residual with
the previous denominator inverse as left weight; its iterates do not
descend monotonically, so the best iterate by true cost is returned.  The
damped refinement accepts steps only when the true cost drops, which makes
its accepted trace nonincreasing by construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceWarning, NumericalError, ValidationError
from .frf import FrfDataset, first_resonance_index
from .lmfd import LmfdModel, LmfdStructure, OrthoBasis, aggregate_scalar_weight, \
    build_orthonormal_basis

LM_REL_TOL = 1e-10
LM_MU_GROWTH = 4.0
LM_MU_SHRINK = 3.0
LM_MU_CEILING = 1e12


# ---------------------------------------------------------------------------
# weighting

@dataclass
class WeightingSpec:
    """Per-frequency diagonal weights, one value per response entry."""

    values: np.ndarray          # m x p x q
    w_max: float
    provenance: str = "user"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValidationError("weights must be finite and nonnegative")
        if np.any(self.values > self.w_max * (1 + 1e-12)):
            raise ValidationError("weights exceed the declared clipping level")

    def subset(self, rows) -> "WeightingSpec":
        return WeightingSpec(values=self.values[:, rows, :], w_max=self.w_max,
                             provenance=self.provenance)


def weighting_inv_truncated(frf: FrfDataset, w_max: float) -> WeightingSpec:
    """Element-wise inverse-magnitude weighting, clipped at w_max."""
    mag = np.abs(frf.response)
    if np.any(mag == 0.0):
        k, i, j = np.argwhere(mag == 0.0)[0]
        raise ValidationError(
            f"zero response entry (output {frf.output_labels[i]}, input "
            f"{frf.input_labels[j]}, omega={frf.omega[k]:.6g}): inverse weighting undefined")
    return WeightingSpec(values=np.minimum(1.0 / mag, w_max), w_max=w_max,
                         provenance="inverse-frf")


def default_w_max(frf: FrfDataset) -> float:
    """Clipping level heuristic: 99th percentile of the inverse magnitude over
    the whole grid.  Only the deepest antiresonances clip, and those sit in
    the higher frequency range where the magnitude has rolled off."""
    inv = 1.0 / np.abs(frf.response)
    return float(np.percentile(inv, 99.0))


# ---------------------------------------------------------------------------
# parametrizations

class LmfdParametrization:
    """Fraction-description surface over a fixed structure and basis."""

    def __init__(self, structure: LmfdStructure, basis: OrthoBasis):
        self.structure = structure
        self.basis = basis
        self.n_theta = structure.n_theta
        self._slots = structure.slots()

    def model(self, theta) -> LmfdModel:
        return LmfdModel(self.structure, self.basis, theta)

    def response(self, theta) -> np.ndarray:
        return self.model(theta).eval_grid()

    def jacobian(self, theta) -> np.ndarray:
        """d vec(G) / d theta as an (m, p, q, n_theta) stack."""
        st = self.structure
        model = self.model(theta)
        phi = self.basis.values
        D, N = model.d_n_at(phi)
        Dinv = np.linalg.inv(D)
        Gflex = Dinv @ N
        m = phi.shape[0]
        J = np.zeros((m, st.p, st.q, self.n_theta), dtype=complex)
        for a, slot in enumerate(self._slots):
            f = phi[:, slot.degree]
            if slot.kind == "D":
                # dG = -D^-1 E_ab G_flex phi
                J[:, :, :, a] = -f[:, None, None] * (
                    Dinv[:, :, slot.row][:, :, None] * Gflex[:, slot.col, :][:, None, :])
            else:
                J[:, :, slot.col, a] = f[:, None] * Dinv[:, :, slot.row]
        if st.n_rigid > 0:
            inv_s2 = 1.0 / self.basis.s**2
            base = len(self._slots)
            for i in range(st.p):
                for j in range(st.q):
                    J[:, i, j, base + i * st.q + j] = inv_s2
        return J


class ModalParametrization:
    """Modal surface: shapes, input gains and flexible pole parameters.

    theta = [shapes (mode-major), gains (mode-major), omega2_flex, zeta_flex].
    Rigid-body modes keep their poles pinned at the origin; only their shape
    and gain entries are free.
    """

    def __init__(self, n_outputs: int, n_inputs: int, n_modes: int, n_rigid: int,
                 omega_grid):
        if not 0 <= n_rigid <= n_modes:
            raise ValidationError("need 0 <= n_rigid <= n_modes")
        self.p = n_outputs
        self.q = n_inputs
        self.n_modes = n_modes
        self.n_rigid = n_rigid
        self.omega = np.asarray(omega_grid, dtype=float).ravel()
        self.s = 1j * self.omega
        self.n_flex = n_modes - n_rigid
        self.n_theta = n_modes * (self.p + self.q) + 2 * self.n_flex

    def pack(self, shapes, gains, omega2, zeta) -> np.ndarray:
        omega2 = np.asarray(omega2, dtype=float)
        zeta = np.asarray(zeta, dtype=float)
        if np.any(omega2[: self.n_rigid] != 0) or np.any(zeta[: self.n_rigid] != 0):
            raise ValidationError("rigid modes must lead the mode order with zero poles")
        return np.concatenate([
            np.asarray(shapes, float).T.ravel(),      # mode-major
            np.asarray(gains, float).ravel(),
            omega2[self.n_rigid:], zeta[self.n_rigid:],
        ])

    def unpack(self, theta):
        n_m, p, q = self.n_modes, self.p, self.q
        shapes = theta[: n_m * p].reshape(n_m, p).T
        gains = theta[n_m * p: n_m * (p + q)].reshape(n_m, q)
        omega2 = np.concatenate([np.zeros(self.n_rigid), theta[n_m * (p + q): n_m * (p + q) + self.n_flex]])
        zeta = np.concatenate([np.zeros(self.n_rigid), theta[n_m * (p + q) + self.n_flex:]])
        return shapes, gains, omega2, zeta

    def _denominators(self, omega2, zeta):
        return omega2[:, None] + zeta[:, None] * self.s[None, :] + self.s[None, :] ** 2

    def response(self, theta) -> np.ndarray:
        shapes, gains, omega2, zeta = self.unpack(theta)
        den = self._denominators(omega2, zeta)
        if np.any(np.abs(den) == 0.0):
            raise NumericalError("modal denominator vanishes on the grid")
        return np.einsum("ji,ik,il->ljk", shapes, gains, 1.0 / den)

    def jacobian(self, theta) -> np.ndarray:
        shapes, gains, omega2, zeta = self.unpack(theta)
        den = self._denominators(omega2, zeta)
        inv = 1.0 / den                                  # n_m x m
        m = self.omega.size
        p, q, n_m = self.p, self.q, self.n_modes
        J = np.zeros((m, p, q, self.n_theta), dtype=complex)
        # shape entries: theta index i*p + j -> e_j gains[i,:] / den_i
        for i in range(n_m):
            for j in range(p):
                J[:, j, :, i * p + j] = gains[i, :][None, :] * inv[i, :, None]
        base = n_m * p
        for i in range(n_m):
            for b in range(q):
                J[:, :, b, base + i * q + b] = shapes[:, i][None, :] * inv[i, :, None]
        base = n_m * (p + q)
        for f, i in enumerate(range(self.n_rigid, n_m)):
            outer = np.einsum("j,k->jk", shapes[:, i], gains[i, :])
            J[:, :, :, base + f] = -outer[None, :, :] * (inv[i, :] ** 2)[:, None, None]
            J[:, :, :, base + self.n_flex + f] = (
                -outer[None, :, :] * (self.s * inv[i, :] ** 2)[:, None, None])
        return J


# ---------------------------------------------------------------------------
# cost

def cost(theta, parametrization, frf: FrfDataset, weighting: WeightingSpec) -> float:
    """Weighted squared-error cost; infinite when the model is singular on
    the grid."""
    try:
        G = parametrization.response(np.asarray(theta, dtype=float))
    except NumericalError:
        return np.inf
    r = weighting.values * (frf.response - G)
    return float(np.sum(r.real**2 + r.imag**2))


def _lift(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x.real.reshape(x.shape[0], -1),
                           x.imag.reshape(x.shape[0], -1)]) if x.ndim > 1 else \
        np.concatenate([x.real, x.imag])


# ---------------------------------------------------------------------------
# solve report

@dataclass
class SolveReport:
    stage: str
    cost_trace: list = field(default_factory=list)
    mu_trace: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    best_index: int = 0
    termination: str = ""
    n_iterations: int = 0
    condition: dict = field(default_factory=dict)

    @property
    def best_cost(self) -> float:
        return self.cost_trace[self.best_index]

    @property
    def oscillating(self) -> bool:
        t = np.asarray(self.cost_trace)
        return bool(np.any(np.diff(t) > 0))

    def rows(self):
        """(iteration, stage, cost, mu, accepted) rows for the trace file."""
        out = []
        for i, v in enumerate(self.cost_trace):
            mu = self.mu_trace[i] if i < len(self.mu_trace) else 0.0
            acc = self.accepted[i] if i < len(self.accepted) else 1
            out.append([i, self.stage, v, mu, int(acc)])
        return out


# ---------------------------------------------------------------------------
# the iterative linearized solve

def _sk_design(param: LmfdParametrization, frf, weighting, Dinv, mask_d=False,
               basis_values=None):
    """Design tensor and offset of the linearized residual.

    residual = W . [ Dinv (D(theta) Gdata - N(theta)) - R0 / s^2 ]
             = A theta + c     (A from the free slots, c from the pinned ones)
    """
    st = param.structure
    phi = param.basis.values if basis_values is None else basis_values
    G = frf.response
    m = G.shape[0]
    W = weighting.values
    A = np.zeros((m, st.p, st.q, param.n_theta), dtype=complex)
    for a, slot in enumerate(param._slots):
        if mask_d and slot.kind == "D":
            continue
        f = phi[:, slot.degree]
        if slot.kind == "D":
            A[:, :, :, a] = f[:, None, None] * (
                Dinv[:, :, slot.row][:, :, None] * G[:, slot.col, :][:, None, :])
        else:
            A[:, :, slot.col, a] = -f[:, None] * Dinv[:, :, slot.row]
    if st.n_rigid > 0:
        inv_s2 = 1.0 / param.basis.s**2
        base = len(param._slots)
        for i in range(st.p):
            for j in range(st.q):
                A[:, i, j, base + i * st.q + j] = -inv_s2
    # pinned diagonal coefficients contribute the constant part
    c = np.zeros((m, st.p, st.q), dtype=complex)
    for i in range(st.p):
        f = phi[:, st.row_degrees[i]]
        c += f[:, None, None] * (Dinv[:, :, i][:, :, None] * G[:, i, :][:, None, :])
    A *= W[:, :, :, None]
    c *= W
    return A.reshape(m * st.p * st.q, param.n_theta), c.ravel()


def _masked_lstsq(A_c, c, free):
    """Real-lifted least squares on the free columns; returns theta and the
    condition number of the column-equilibrated design."""
    A = np.vstack([A_c[:, free].real, A_c[:, free].imag])
    b = -np.concatenate([c.real, c.imag])
    norms = np.linalg.norm(A, axis=0)
    if np.any(norms == 0.0):
        raise NumericalError("zero design column; structure unidentifiable on this grid")
    x, _, rank, sv = np.linalg.lstsq(A / norms, b, rcond=None)
    if rank < free.sum():
        raise NumericalError(
            f"rank-deficient design ({rank} < {int(free.sum())}); basis condition "
            f"{sv[0] / sv[-1] if sv[-1] > 0 else np.inf:.3e}")
    theta = np.zeros(A_c.shape[1])
    theta[free] = x / norms
    return theta, float(sv[0] / sv[-1])


def levy_initial(param: LmfdParametrization, frf, weighting) -> np.ndarray:
    """One linear pass with the pinned diagonal as fixed denominator."""
    model = param.model(np.zeros(param.n_theta))
    D0, _ = model.d_n_at(param.basis.values)
    Dinv = np.linalg.inv(D0)
    A, c = _sk_design(param, frf, weighting, Dinv, mask_d=True)
    free = np.ones(param.n_theta, dtype=bool)
    for a, slot in enumerate(param._slots):
        if slot.kind == "D":
            free[a] = False
    theta, _ = _masked_lstsq(A, c, free)
    return theta


def sk_solve(structure: LmfdStructure, frf: FrfDataset, weighting: WeightingSpec,
             theta0=None, i_sk: int = 20, basis: OrthoBasis | None = None,
             basis_weights=None) -> tuple:
    """Iteratively reweighted linear solve of the fraction description.

    Every iterate's true cost is recorded and the lowest-cost iterate is
    returned; the trace is not expected to be monotone, a rise between
    iterates is flagged with a warning, not failed.  With i_sk = 0 the
    initial estimate comes back unchanged.
    """
    if basis is None:
        wbar = aggregate_scalar_weight(weighting.values) if basis_weights is None \
            else np.asarray(basis_weights, dtype=float)
        basis = build_orthonormal_basis(structure, frf.omega, wbar)
    param = LmfdParametrization(structure, basis)
    theta = levy_initial(param, frf, weighting) if theta0 is None \
        else np.asarray(theta0, dtype=float)

    report = SolveReport(stage="sk")
    iterates = [theta]
    report.cost_trace.append(cost(theta, param, frf, weighting))
    report.mu_trace.append(0.0)
    report.accepted.append(True)
    worst_cond = 0.0
    for _ in range(i_sk):
        D, _ = param.model(theta).d_n_at(basis.values)
        Dinv = np.linalg.inv(D)
        A, c = _sk_design(param, frf, weighting, Dinv)
        theta, cnd = _masked_lstsq(A, c, np.ones(param.n_theta, dtype=bool))
        worst_cond = max(worst_cond, cnd)
        iterates.append(theta)
        report.cost_trace.append(cost(theta, param, frf, weighting))
        report.mu_trace.append(0.0)
        report.accepted.append(True)
    report.best_index = int(np.argmin(report.cost_trace))
    report.condition["sk_design"] = worst_cond
    report.n_iterations = i_sk
    report.termination = "iterations"
    trace = np.asarray(report.cost_trace)
    data_scale = float(np.sum((weighting.values * np.abs(frf.response)) ** 2))
    if np.any(np.diff(trace) > 1e-14 * max(data_scale, trace.max())):
        warnings.warn("iterative solve cost rose between iterates (expected; "
                      "best iterate is returned)", ConvergenceWarning, stacklevel=2)
    return report, param.model(iterates[report.best_index])


# ---------------------------------------------------------------------------
# damped Gauss-Newton refinement

def lm_refine(theta0, parametrization, frf: FrfDataset, weighting: WeightingSpec,
              i_max: int = 100, rel_tol: float = LM_REL_TOL) -> tuple:
    """Levenberg-Marquardt minimization of the weighted cost.

    Accepted steps never increase the cost; the damping grows by 4 on
    rejection and shrinks by 3 on acceptance.  Terminates on i_max accepted
    steps, on a relative decrease below rel_tol, or with a warning when no
    descent direction remains at the damping ceiling.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    V = cost(theta, parametrization, frf, weighting)
    if not np.isfinite(V):
        raise ValidationError("initial parameters give an infinite cost")
    report = SolveReport(stage="lm")
    report.cost_trace.append(V)
    report.mu_trace.append(0.0)
    report.accepted.append(True)

    W = weighting.values
    mu = None
    mu0 = None
    n_accepted = 0
    termination = "max_iterations"
    while n_accepted < i_max:
        G = parametrization.response(theta)
        Jc = -W[:, :, :, None] * parametrization.jacobian(theta)
        m = Jc.shape[0]
        J = np.vstack([Jc.reshape(m * Jc.shape[1] * Jc.shape[2], -1).real,
                       Jc.reshape(m * Jc.shape[1] * Jc.shape[2], -1).imag])
        r = W * (frf.response - G)
        rv = np.concatenate([r.real.ravel(), r.imag.ravel()])
        JtJ = J.T @ J
        g = J.T @ rv
        if mu is None:
            mu0 = 1e-6 * float(np.max(np.diag(JtJ)))
            mu = mu0
        gnorm = np.linalg.norm(g)
        if gnorm <= 1e-14 * max(1.0, np.sqrt(V)):
            termination = "converged"
            break
        stepped = False
        while True:
            try:
                delta = np.linalg.solve(JtJ + mu * np.eye(JtJ.shape[0]), -g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None:
                V_trial = cost(theta + delta, parametrization, frf, weighting)
                if V_trial < V:
                    theta = theta + delta
                    decrease = (V - V_trial) / V if V > 0 else 0.0
                    V = V_trial
                    mu = mu / LM_MU_SHRINK
                    n_accepted += 1
                    report.cost_trace.append(V)
                    report.mu_trace.append(mu)
                    report.accepted.append(True)
                    stepped = True
                    if decrease < rel_tol:
                        termination = "converged"
                    break
            mu *= LM_MU_GROWTH
            if mu > LM_MU_CEILING * mu0:
                break
        if not stepped:
            if V <= 1e-16 * max(report.cost_trace[0], np.finfo(float).tiny):
                termination = "converged"  # cost already at the numerical floor
            else:
                termination = "no_descent"
                warnings.warn("no descending step found at the damping ceiling; "
                              "returning the best iterate", ConvergenceWarning,
                              stacklevel=2)
            break
        if termination == "converged":
            break
    report.best_index = int(np.argmin(report.cost_trace))
    report.termination = termination
    report.n_iterations = n_accepted
    return report, theta


# ---------------------------------------------------------------------------
# output-set extension

def extend_outputs(omega2, zeta, input_gains, frf: FrfDataset,
                   weighting: WeightingSpec):
    """Fit shape rows for additional outputs with every other parameter fixed.

    One weighted linear least-squares problem per new output row.  Returns
    (rows, residual_norms).
    """
    omega2 = np.asarray(omega2, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    gains = np.atleast_2d(np.asarray(input_gains, dtype=float))
    n_m = omega2.size
    s = 1j * frf.omega
    den = omega2[:, None] + zeta[:, None] * s[None, :] + s[None, :] ** 2
    basis = gains[:, None, :] / den[:, :, None]          # n_m x m x q
    rows = np.empty((frf.n_outputs, n_m))
    residuals = np.empty(frf.n_outputs)
    for out in range(frf.n_outputs):
        w = weighting.values[:, out, :]
        A_c = (w[None, :, :] * basis).reshape(n_m, -1).T   # (m q) x n_m
        b_c = (w * frf.response[:, out, :]).ravel()
        A = np.vstack([A_c.real, A_c.imag])
        b = np.concatenate([b_c.real, b_c.imag])
        sol, res, rank, sv = np.linalg.lstsq(A, b, rcond=None)
        if rank < n_m:
            raise NumericalError(
                f"modes indistinguishable on this grid for output "
                f"{frf.output_labels[out]} (rank {rank} < {n_m})")
        rows[out] = sol
        residuals[out] = float(np.linalg.norm(A @ sol - b))
    return rows, residuals
