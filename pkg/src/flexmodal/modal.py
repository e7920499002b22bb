"""Modally damped gray-box models and their frequency-domain evaluation.

A model is a superposition of second-order modes.  Mode i contributes

    L[:, i] R[i, :] / (s^2 + zeta_i s + omega2_i)

to the response matrix, where the columns of L hold the mode shapes sampled
at the sensor positions and the rows of R hold the gains from the inputs
into each mode.  Rigid-body modes are ordinary entries with
omega2 = zeta = 0 (a double pole at s = 0).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError

_RIGID_TOL = 1e-12


def _as_array(x, dtype=float):
    return np.asarray(x, dtype=dtype)


def canonical_mode_order(omega2, zeta):
    """Indices sorting modes by ascending omega2, ties by ascending zeta."""
    return np.lexsort((np.asarray(zeta, dtype=float), np.asarray(omega2, dtype=float)))


def normalize_shape_signs(shapes, gains):
    """Make the largest-magnitude entry of each shape column positive.

    The compensating sign goes into the matching row of ``gains`` so the
    rank-one product of every mode is unchanged.
    """
    shapes = np.array(shapes, dtype=float)
    gains = np.array(gains, dtype=float)
    for i in range(shapes.shape[1]):
        col = shapes[:, i]
        if not col.any():
            continue
        if col[np.argmax(np.abs(col))] < 0:
            shapes[:, i] = -col
            gains[i, :] = -gains[i, :]
    return shapes, gains


@dataclass(frozen=True)
class ModalModel:
    """Immutable modally damped model.

    ``zeta`` stores the full first-order coefficient of ``s`` in
    ``s^2 + zeta s + omega2`` (units rad/s).  The dimensionless damping
    ratio is available as :meth:`damping_ratios`.

    Construction canonicalizes the representation: modes are sorted by
    ascending ``omega2`` (ties by ``zeta``) and shape-column signs are fixed
    so serialization is deterministic.
    """

    omega2: np.ndarray
    zeta: np.ndarray
    mode_shapes: np.ndarray      # n_outputs x n_modes, sampled at sensor_coords
    input_gains: np.ndarray      # n_modes x n_inputs
    sensor_coords: np.ndarray    # n_outputs x 2, meters
    n_rigid: int = field(default=0)

    def __post_init__(self):
        omega2 = _as_array(self.omega2).ravel()
        zeta = _as_array(self.zeta).ravel()
        shapes = np.atleast_2d(_as_array(self.mode_shapes))
        gains = np.atleast_2d(_as_array(self.input_gains))
        coords = np.atleast_2d(_as_array(self.sensor_coords))

        n_m = omega2.size
        if zeta.size != n_m:
            raise ValidationError("omega2 and zeta must have the same length")
        if shapes.shape[1] != n_m or gains.shape[0] != n_m:
            raise ValidationError("mode_shapes/input_gains inconsistent with mode count")
        if coords.shape != (shapes.shape[0], 2):
            raise ValidationError("sensor_coords must be n_outputs x 2")
        if np.any(omega2 < -_RIGID_TOL) or np.any(zeta < -_RIGID_TOL):
            raise ValidationError("omega2 and zeta must be nonnegative")
        omega2 = np.maximum(omega2, 0.0)
        zeta = np.maximum(zeta, 0.0)

        rigid = (omega2 == 0.0)
        if np.any(zeta[rigid] != 0.0):
            raise ValidationError("rigid-body modes (omega2 = 0) must have zeta = 0")
        if int(np.sum(rigid)) != self.n_rigid:
            raise ValidationError(
                f"n_rigid = {self.n_rigid} but {int(np.sum(rigid))} modes have omega2 = 0"
            )
        flex = ~rigid
        if np.any(~shapes[:, flex].any(axis=0)):
            raise ValidationError("every flexible mode needs a nonzero shape column")

        order = canonical_mode_order(omega2, zeta)
        shapes, gains = normalize_shape_signs(shapes[:, order], gains[order, :])
        object.__setattr__(self, "omega2", omega2[order])
        object.__setattr__(self, "zeta", zeta[order])
        object.__setattr__(self, "mode_shapes", shapes)
        object.__setattr__(self, "input_gains", gains)
        object.__setattr__(self, "sensor_coords", coords.astype(float))
        for name in ("omega2", "zeta", "mode_shapes", "input_gains", "sensor_coords"):
            getattr(self, name).setflags(write=False)

    @property
    def n_modes(self) -> int:
        return self.omega2.size

    @property
    def n_outputs(self) -> int:
        return self.mode_shapes.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.input_gains.shape[1]

    def damping_ratios(self):
        """Dimensionless zeta/(2 omega); 0 for rigid-body modes."""
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = self.zeta / (2.0 * np.sqrt(self.omega2))
        return np.where(self.omega2 > 0, ratio, 0.0)

    def pole_pairs(self):
        """Roots of each s^2 + zeta_i s + omega2_i as an (n_modes, 2) array."""
        out = np.empty((self.n_modes, 2), dtype=complex)
        for i in range(self.n_modes):
            out[i] = np.roots([1.0, self.zeta[i], self.omega2[i]])
        return out


def mode_denominators(omega2, zeta, omega_grid):
    """(jw)^2 + zeta jw + omega2 for every (mode, frequency) pair."""
    omega_grid = np.asarray(omega_grid, dtype=float)
    s = 1j * omega_grid
    return omega2[:, None] + zeta[:, None] * s[None, :] + s[None, :] ** 2


def frf_eval(model: ModalModel, omega_grid) -> np.ndarray:
    """Evaluate the response matrix on a frequency grid.

    Returns a complex array of shape (n_outputs, n_inputs, len(omega_grid)).
    Rigid-body modes make omega = 0 a genuine pole, so grids touching zero
    are rejected when such modes are present.
    """
    omega_grid = np.atleast_1d(np.asarray(omega_grid, dtype=float))
    if model.n_rigid > 0 and np.any(omega_grid == 0.0):
        raise NumericalError("omega = 0 is a pole of a model with rigid-body modes")
    den = mode_denominators(model.omega2, model.zeta, omega_grid)  # n_m x m
    # G[j,k,l] = sum_i L[j,i] R[i,k] / den[i,l]
    return np.einsum("ji,ik,il->jkl", model.mode_shapes, model.input_gains, 1.0 / den)


@dataclass(frozen=True)
class ScheduleMap:
    """Affine map from stage position to per-output surface coordinates."""

    offsets: np.ndarray  # n_outputs x 2, meters

    def __post_init__(self):
        object.__setattr__(self, "offsets", np.atleast_2d(_as_array(self.offsets)))
        if self.offsets.shape[1] != 2:
            raise ValidationError("offsets must be n_outputs x 2")


def apply_schedule(schedule: ScheduleMap, rho) -> np.ndarray:
    """Translate a stage trajectory into per-output coordinate trajectories.

    ``rho`` is (T, 2); the result is (n_outputs, T, 2) with
    result[y, t] = offsets[y] + rho[t], exactly.
    """
    rho = np.atleast_2d(_as_array(rho))
    if rho.shape[1] != 2:
        raise ValidationError("rho trajectory must be T x 2")
    return schedule.offsets[:, None, :] + rho[None, :, :]


@dataclass(frozen=True)
class PositionDependentModel:
    """Temporal modal core plus one continuous shape surface per mode."""

    omega2: np.ndarray
    zeta: np.ndarray
    input_gains: np.ndarray
    surfaces: tuple                   # one TpsSurface per mode
    domain: tuple                     # (xmin, xmax, ymin, ymax)
    n_rigid: int = 0

    def __post_init__(self):
        object.__setattr__(self, "omega2", _as_array(self.omega2).ravel())
        object.__setattr__(self, "zeta", _as_array(self.zeta).ravel())
        object.__setattr__(self, "input_gains", np.atleast_2d(_as_array(self.input_gains)))
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        if len(self.surfaces) != self.omega2.size:
            raise ValidationError("need exactly one shape surface per mode")
        xmin, xmax, ymin, ymax = self.domain
        if not (xmin < xmax and ymin < ymax):
            raise ValidationError("degenerate domain bounds")

    @property
    def n_modes(self) -> int:
        return self.omega2.size

    def shape_row(self, coord) -> np.ndarray:
        """Mode-shape row [surface_i(coord)] at one surface coordinate."""
        from .tps import eval_tps  # local import to avoid a cycle

        x, y = float(coord[0]), float(coord[1])
        xmin, xmax, ymin, ymax = self.domain
        if not (xmin <= x <= xmax and ymin <= y <= ymax):
            warnings.warn(
                f"coordinate ({x:.4g}, {y:.4g}) outside the fitted domain; extrapolating",
                stacklevel=2,
            )
        return np.array([eval_tps(s, (x, y)) for s in self.surfaces])


def eval_at_position(pdm: PositionDependentModel, coord, omega_grid) -> np.ndarray:
    """Response row at an arbitrary surface coordinate.

    Returns (1, n_inputs, len(omega_grid)): the model of :func:`frf_eval`
    with the sampled shape row replaced by the interpolated one.
    """
    omega_grid = np.atleast_1d(np.asarray(omega_grid, dtype=float))
    if pdm.n_rigid > 0 and np.any(omega_grid == 0.0):
        raise NumericalError("omega = 0 is a pole of a model with rigid-body modes")
    row = pdm.shape_row(coord)
    den = mode_denominators(pdm.omega2, pdm.zeta, omega_grid)
    return np.einsum("i,ik,il->kl", row, pdm.input_gains, 1.0 / den)[None, :, :]
