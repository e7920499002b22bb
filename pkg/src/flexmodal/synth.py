"""Synthetic flexible-plate benchmark: ground-truth models and simulated
closed-loop experiments for exercising the identification pipeline.

The plate carries three out-of-plane rigid-body modes (piston and the two
tilts) plus a configurable number of flexible modes whose shapes are
products of free-free beam eigenfunctions over the rectangle.  That gives
smooth closed-form shapes (torsion, saddle, umbrella, ...) that can be
evaluated anywhere, which is what makes the interpolation stage testable
against ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq

from .errors import NumericalError, ValidationError
from .modal import ModalModel

# ---------------------------------------------------------------------------
# free-free beam eigenfunctions on [0, 1], unit RMS

_QUAD_N = 4001  # fixed quadrature resolution keeps normalization deterministic


def _beam_beta(k: int) -> float:
    """k-th positive root of cos(b) = 1/cosh(b) (elastic free-free modes)."""
    center = (2 * k + 1) * np.pi / 2.0
    return brentq(lambda b: np.cos(b) - 1.0 / np.cosh(b), center - 0.5, center + 0.5,
                  xtol=1e-14)


def beam_eigenfunction(index: int, xi):
    """Free-free Euler-Bernoulli beam mode evaluated at xi in [0, 1].

    Index 0 is translation, 1 is rotation, >= 2 are the elastic modes.
    All are normalized to unit RMS over the interval, so tensor products
    over a rectangle are orthonormal in the continuum sense.
    """
    xi = np.asarray(xi, dtype=float)
    if index == 0:
        return np.ones_like(xi)
    if index == 1:
        return np.sqrt(3.0) * (2.0 * xi - 1.0)
    beta = _beam_beta(index - 1)
    sigma = (np.cosh(beta) - np.cos(beta)) / (np.sinh(beta) - np.sin(beta))

    def raw(t):
        return (np.cosh(beta * t) + np.cos(beta * t)
                - sigma * (np.sinh(beta * t) + np.sin(beta * t)))

    grid = np.linspace(0.0, 1.0, _QUAD_N)
    rms = np.sqrt(np.trapezoid(raw(grid) ** 2, grid))
    return raw(xi) / rms


def flexible_mode_orders(n_flex: int):
    """Deterministic (i, j) beam-index pairs for the first n_flex plate modes.

    The rigid combinations (0,0), (1,0), (0,1) are excluded; remaining pairs
    are ordered by a frequency-like key so (1,1) torsion comes first.
    """
    pairs = [(i, j) for i in range(9) for j in range(9) if i + j >= 2]
    pairs.sort(key=lambda p: (p[0] ** 2 + p[1] ** 2, -p[0], -p[1]))
    if n_flex > len(pairs):
        raise ValidationError(f"at most {len(pairs)} flexible modes supported")
    return pairs[:n_flex]


def plate_shape_function(order, size):
    """Closed-form mode shape for beam-index pair ``order`` on a centered plate."""
    i, j = order
    lx, ly = size

    def shape(x, y):
        return (beam_eigenfunction(i, (np.asarray(x) + lx / 2.0) / lx)
                * beam_eigenfunction(j, (np.asarray(y) + ly / 2.0) / ly))

    return shape


def rigid_shape_functions():
    """Piston, rotation about x (z = +y), rotation about y (z = -x)."""
    return [
        lambda x, y: np.ones_like(np.asarray(x, dtype=float)),
        lambda x, y: np.asarray(y, dtype=float) + 0.0 * np.asarray(x),
        lambda x, y: -np.asarray(x, dtype=float) + 0.0 * np.asarray(y),
    ]


# ---------------------------------------------------------------------------
# bench geometry

def sensor_layout(span_x: float, span_y: float, t_mid: float = 0.41,
                  inner: float = 0.45) -> np.ndarray:
    """16-sensor layout: 12 on the perimeter of the sensed rectangle plus an
    interior ring of 4.  Symmetric, so rigid-body shape columns sampled here
    are mutually orthogonal.  The default fractions keep every bench mode
    well away from having all its node lines on the sensor rows."""
    hx, hy = span_x / 2.0, span_y / 2.0
    t = np.array([-1.0, -t_mid, t_mid, 1.0])
    bottom = np.column_stack([t * hx, np.full(4, -hy)])
    top = np.column_stack([(t * hx)[::-1], np.full(4, hy)])
    left = np.column_stack([np.full(2, -hx), np.array([0.5, -0.5]) * hy])
    right = np.column_stack([np.full(2, hx), np.array([-0.5, 0.5]) * hy])
    ring = inner * np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    return np.vstack([bottom, right, top, left, ring])


def actuator_layout(span_x: float, span_y: float) -> np.ndarray:
    """4 control actuators at the corners of the actuated rectangle plus 3
    identification actuators; sums of x, y and x*y vanish over the set."""
    hx, hy = span_x / 2.0, span_y / 2.0
    control = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    ident = np.array([[0.0, 0.58 * hy], [0.8 * hx, -0.29 * hy], [-0.8 * hx, -0.29 * hy]])
    return np.vstack([control, ident])


@dataclass(frozen=True)
class PlateSpec:
    """Ground-truth plate description for the synthetic bench."""

    size: tuple = (0.30, 0.24)                  # side lengths, meters
    n_flex: int = 9
    flex_freqs_hz: tuple = (62.0, 85.0, 110.0, 140.0, 175.0, 215.0, 260.0, 310.0, 365.0)
    damping_ratios: tuple = (0.030, 0.028, 0.026, 0.024, 0.022, 0.021, 0.020, 0.019, 0.018)
    sensor_coords: np.ndarray = None
    actuator_coords: np.ndarray = None
    control_actuators: tuple = (0, 1, 2, 3)
    control_sensors: tuple = (0, 3, 6, 9)       # perimeter corners
    snr_db: float | None = 40.0
    seed: int = 0

    def __post_init__(self):
        if self.sensor_coords is None:
            object.__setattr__(self, "sensor_coords",
                               sensor_layout(0.77 * self.size[0], 0.75 * self.size[1]))
        else:
            object.__setattr__(self, "sensor_coords",
                               np.atleast_2d(np.asarray(self.sensor_coords, dtype=float)))
        if self.actuator_coords is None:
            object.__setattr__(self, "actuator_coords",
                               actuator_layout(0.70 * self.size[0], 0.69 * self.size[1]))
        else:
            object.__setattr__(self, "actuator_coords",
                               np.atleast_2d(np.asarray(self.actuator_coords, dtype=float)))
        if self.n_flex < 0:
            raise ValidationError("n_flex must be nonnegative")
        if len(self.flex_freqs_hz) < self.n_flex or len(self.damping_ratios) < self.n_flex:
            raise ValidationError("need a frequency and damping ratio per flexible mode")
        freqs = np.asarray(self.flex_freqs_hz[: self.n_flex])
        if self.n_flex and np.any(np.diff(freqs) <= 0):
            raise ValidationError("flexible mode frequencies must be ascending")
        if self.snr_db is not None and not np.isfinite(self.snr_db):
            raise ValidationError("snr_db must be finite or None")
        hx, hy = self.size[0] / 2.0, self.size[1] / 2.0
        for name in ("sensor_coords", "actuator_coords"):
            c = getattr(self, name)
            if np.any(np.abs(c[:, 0]) > hx) or np.any(np.abs(c[:, 1]) > hy):
                raise ValidationError(f"{name} outside the plate")

    @property
    def n_sensors(self) -> int:
        return self.sensor_coords.shape[0]

    @property
    def n_actuators(self) -> int:
        return self.actuator_coords.shape[0]


def make_plate_model(spec: PlateSpec) -> ModalModel:
    """Ground-truth modal model: 3 rigid-body modes plus spec.n_flex flexible
    modes, with shapes sampled at the sensors and input gains sampled at the
    actuators (point forces, reciprocal sampling)."""
    shapes = rigid_shape_functions()
    orders = flexible_mode_orders(spec.n_flex)
    shapes += [plate_shape_function(o, spec.size) for o in orders]

    omega = 2.0 * np.pi * np.asarray(spec.flex_freqs_hz[: spec.n_flex], dtype=float)
    ratios = np.asarray(spec.damping_ratios[: spec.n_flex], dtype=float)
    omega2 = np.concatenate([np.zeros(3), omega**2])
    zeta = np.concatenate([np.zeros(3), 2.0 * ratios * omega])

    sx, sy = spec.sensor_coords[:, 0], spec.sensor_coords[:, 1]
    ax, ay = spec.actuator_coords[:, 0], spec.actuator_coords[:, 1]
    mode_shapes = np.column_stack([f(sx, sy) for f in shapes])
    input_gains = np.vstack([f(ax, ay) for f in shapes])

    return ModalModel(
        omega2=omega2, zeta=zeta, mode_shapes=mode_shapes, input_gains=input_gains,
        sensor_coords=spec.sensor_coords, n_rigid=3,
    )


def true_shape_table(spec: PlateSpec):
    """Shape functions aligned with the canonical mode order of
    :func:`make_plate_model`, for interpolation ground truth."""
    funcs = rigid_shape_functions() + [
        plate_shape_function(o, spec.size) for o in flexible_mode_orders(spec.n_flex)
    ]
    return funcs


# ---------------------------------------------------------------------------
# experiment records and simulation

@dataclass
class ExperimentRecord:
    """One experiment: every recorded channel plus the injected signal."""

    sample_rate: float
    data: np.ndarray            # n_samples x n_channels
    channels: list
    n_periods: int
    period_length: int
    excited_input: str          # "r_uc:<k>" or "u_nc:<k>"
    realization: int = 0

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=float))
        if self.data.shape[0] != self.n_periods * self.period_length:
            raise ValidationError("record length must be n_periods * period_length")
        if self.data.shape[1] != len(self.channels):
            raise ValidationError("channel names inconsistent with data width")

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.data[:, self.channels.index(name)]
        except ValueError as exc:
            raise ValidationError(f"record has no channel {name!r}") from exc


def write_record_file(path, rec: ExperimentRecord):
    """Columnar text: header row naming channels, one time sample per row."""
    meta = {
        "sample_rate": rec.sample_rate,
        "n_periods": rec.n_periods,
        "period_length": rec.period_length,
        "excited_input": rec.excited_input,
        "realization": rec.realization,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in meta.items():
            fh.write(f"# {key}: {value}\n" if not isinstance(value, str)
                     else f'# {key}: "{value}"\n')
        fh.write(" ".join(rec.channels) + "\n")
        np.savetxt(fh, rec.data, fmt="%.17g")


def read_record_file(path) -> ExperimentRecord:
    meta = {}
    with open(path, "r", encoding="utf-8") as fh:
        line = fh.readline()
        while line.startswith("#"):
            body = line[1:].strip()
            key, _, value = body.partition(":")
            meta[key.strip()] = value.strip().strip('"')
            line = fh.readline()
        channels = line.split()
        data = np.atleast_2d(np.loadtxt(fh))
    for key in ("sample_rate", "n_periods", "period_length", "excited_input"):
        if key not in meta:
            raise ValidationError(f"record file {path} missing {key}")
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"record file {path} contains non-finite samples")
    return ExperimentRecord(
        sample_rate=float(meta["sample_rate"]), data=data, channels=channels,
        n_periods=int(meta["n_periods"]), period_length=int(meta["period_length"]),
        excited_input=str(meta["excited_input"]),
        realization=int(meta.get("realization", 0)),
    )


@dataclass(frozen=True)
class StabilizingFeedback:
    """Diagonal discrete PD on the rigid-body motions.

    Four control sensors are decoupled into (piston, tilt-x, tilt-y) with the
    pseudo-inverse of the rigid shape matrix; modal PD forces are mapped back
    onto the four control actuators the same way.
    """

    sensor_indices: tuple
    actuator_indices: tuple
    sensor_decouple: np.ndarray   # 3 x 4
    actuator_map: np.ndarray      # 4 x 3
    kp: np.ndarray                # per rigid DOF
    kd: np.ndarray
    sample_rate: float


def design_rigid_pd(model: ModalModel, spec: PlateSpec, sample_rate: float,
                    bandwidth_hz: float = 4.0, gain_scale: float = 1.0) -> StabilizingFeedback:
    # bandwidths much above ~5 Hz destabilize the bench plate through PD
    # spillover into the flexible modes; 4 Hz leaves a comfortable margin
    rigid_cols = np.flatnonzero(model.omega2 == 0.0)
    if rigid_cols.size != 3:
        raise ValidationError("rigid PD design expects exactly 3 rigid-body modes")
    L_rb = model.mode_shapes[np.asarray(spec.control_sensors), :][:, rigid_cols]
    R_rb = model.input_gains[rigid_cols, :][:, np.asarray(spec.control_actuators)]
    wc = 2.0 * np.pi * bandwidth_hz
    return StabilizingFeedback(
        sensor_indices=tuple(spec.control_sensors),
        actuator_indices=tuple(spec.control_actuators),
        sensor_decouple=np.linalg.pinv(L_rb),
        actuator_map=np.linalg.pinv(R_rb),
        kp=gain_scale * wc**2 * np.ones(3),
        kd=gain_scale * 2.0 * 0.7 * wc * np.ones(3),
        sample_rate=sample_rate,
    )


def _zoh_mode_blocks(model: ModalModel, dt: float):
    """Exact zero-order-hold discretization of every 2-state modal block."""
    n_m = model.n_modes
    Ad = np.empty((n_m, 2, 2))
    Bd = np.empty((n_m, 2))
    for i in range(n_m):
        M = np.zeros((3, 3))
        M[0, 1] = 1.0
        M[1, 0] = -model.omega2[i]
        M[1, 1] = -model.zeta[i]
        M[1, 2] = 1.0
        E = expm(M * dt)
        Ad[i] = E[:2, :2]
        Bd[i] = E[:2, 2]
    return Ad, Bd


def closed_loop_matrix(model: ModalModel, controller: StabilizingFeedback) -> np.ndarray:
    """Discrete closed-loop state matrix (modal states + PD memory)."""
    n_m = model.n_modes
    dt = 1.0 / controller.sample_rate
    Ad, Bd = _zoh_mode_blocks(model, dt)
    A = np.zeros((2 * n_m, 2 * n_m))
    for i in range(n_m):
        A[2 * i: 2 * i + 2, 2 * i: 2 * i + 2] = Ad[i]
    C = np.zeros((len(controller.sensor_indices), 2 * n_m))
    for j, s in enumerate(controller.sensor_indices):
        C[j, 0::2] = model.mode_shapes[s, :]
    M = controller.sensor_decouple @ C                       # 3 x 2n
    Bf = np.zeros((2 * n_m, len(controller.actuator_indices)))
    for i in range(n_m):
        Bf[2 * i: 2 * i + 2, :] = np.outer(Bd[i], model.input_gains[i, list(controller.actuator_indices)])
    T = Bf @ controller.actuator_map                         # 2n x 3
    kp = np.diag(controller.kp)
    kd_dt = np.diag(controller.kd / dt)
    n = 2 * n_m
    Acl = np.zeros((n + 3, n + 3))
    Acl[:n, :n] = A - T @ (kp + kd_dt) @ M
    Acl[:n, n:] = T @ kd_dt
    Acl[n:, :n] = M
    return Acl


def simulate_response(model: ModalModel, u: ExperimentRecord,
                      controller: StabilizingFeedback | None = None,
                      noise_sigma: float = 0.0, noise_seed=None) -> ExperimentRecord:
    """Simulate one experiment and return the full record.

    The injected signal in ``u`` enters either a control actuator (added to
    the PD output), an identification actuator, or an in-plane control
    channel (recorded only, no out-of-plane response).  Sensor noise is
    white, per-channel equal variance, and feeds back through the
    controller.
    """
    injected = u.channel("injected")
    batch = _simulate_batch(model, injected[:, None], u.excited_input, u.sample_rate,
                            controller, noise_sigma,
                            np.random.default_rng(noise_seed), n_inplane=4)
    z, uc = batch
    data = np.column_stack([z[:, :, 0], uc[:, :, 0], injected])
    channels = [f"z{j:02d}" for j in range(model.n_outputs)] + \
               [f"uc{k}" for k in range(uc.shape[1])] + ["injected"]
    return ExperimentRecord(
        sample_rate=u.sample_rate, data=data, channels=channels,
        n_periods=u.n_periods, period_length=u.period_length,
        excited_input=u.excited_input, realization=u.realization,
    )


def _parse_excited(excited_input: str, n_ctrl: int, n_inplane: int, n_ident: int):
    kind, _, idx = excited_input.partition(":")
    k = int(idx)
    if kind == "r_uc":
        if not 0 <= k < n_ctrl + n_inplane:
            raise ValidationError(f"control injection index {k} out of range")
        return ("ctrl", k) if k < n_ctrl else ("inplane", k)
    if kind == "u_nc":
        if not 0 <= k < n_ident:
            raise ValidationError(f"identification injection index {k} out of range")
        return ("ident", k)
    raise ValidationError(f"unknown excited input {excited_input!r}")


def _simulate_batch(model, injections, excited_input, sample_rate, controller,
                    noise_sigma, rng, n_inplane):
    """Core loop, vectorized over a batch of noise/injection realizations.

    injections: n_samples x B.  Returns (z, uc) with shapes
    (n_samples, n_sensors, B) and (n_samples, n_ctrl + n_inplane, B).
    """
    f_max = np.sqrt(model.omega2.max(initial=0.0)) / (2.0 * np.pi)
    if sample_rate <= 10.0 * f_max:
        raise ValidationError(
            f"sample rate {sample_rate:g} Hz too low for modes up to {f_max:g} Hz")

    n_samples, B = injections.shape
    n_m = model.n_modes
    p = model.n_outputs
    n_act = model.n_inputs
    dt = 1.0 / sample_rate

    if controller is not None:
        poles = np.linalg.eigvals(closed_loop_matrix(model, controller))
        worst = np.abs(poles).max()
        if worst > 1.0 + 1e-9:
            raise NumericalError(f"unstable closed loop: |pole| = {worst:.6f}")
        ctrl_act = list(controller.actuator_indices)
        ctrl_sens = list(controller.sensor_indices)
        n_ctrl = len(ctrl_act)
    else:
        ctrl_act, ctrl_sens, n_ctrl = [0, 1, 2, 3][: min(4, n_act)], [], 4
    ident_act = [a for a in range(n_act) if a not in ctrl_act]

    target, tk = _parse_excited(excited_input, n_ctrl, n_inplane, len(ident_act))

    Ad, Bd = _zoh_mode_blocks(model, dt)
    L = model.mode_shapes
    R = model.input_gains

    noise = np.zeros((n_samples, p, B))
    if noise_sigma > 0.0:
        noise = noise_sigma * rng.standard_normal((n_samples, p, B))

    eta = np.zeros((n_m, 2, B))
    eta_hat_prev = np.zeros((3, B))
    z_out = np.empty((n_samples, p, B))
    uc_out = np.zeros((n_samples, n_ctrl + n_inplane, B))

    for t in range(n_samples):
        y = L @ eta[:, 0, :]                       # p x B, true deflection
        y_meas = y + noise[t]
        z_out[t] = y_meas

        u_act = np.zeros((n_act, B))
        if controller is not None:
            eta_hat = controller.sensor_decouple @ y_meas[ctrl_sens, :]
            pd = -(controller.kp[:, None] * eta_hat
                   + controller.kd[:, None] * (eta_hat - eta_hat_prev) / dt)
            eta_hat_prev = eta_hat
            force = controller.actuator_map @ pd   # n_ctrl x B
            u_act[ctrl_act, :] = force
            uc_out[t, :n_ctrl] = force

        if target == "ctrl":
            u_act[ctrl_act[tk], :] += injections[t]
            uc_out[t, tk] += injections[t]
        elif target == "ident":
            u_act[ident_act[tk], :] += injections[t]
        else:  # in-plane: recorded, no out-of-plane response
            uc_out[t, tk] += injections[t]

        f = R @ u_act                              # n_m x B
        eta = np.einsum("mij,mjb->mib", Ad, eta) + Bd[:, :, None] * f[:, None, :]

    return z_out, uc_out
