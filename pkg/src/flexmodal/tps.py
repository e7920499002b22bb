"""Smoothed thin-plate-spline surfaces for sampled mode shapes.

A surface through points (x_j, y_j, z_j) is

    W(x, y) = c0 + c_x x + c_y y + sum_j c_j r_j^2 ln(r_j),

with r_j the distance to center j, subject to the side constraints
sum c_j = sum c_j x_j = sum c_j y_j = 0.  The smoothing parameter lam
trades data fit against bending energy; lam = 0 interpolates exactly and
the fit residual at center k is exactly lam * c_k.

Coordinates are mapped to a unit bounding box (one isotropic scale, so the
kernel stays radial) before the kernel is evaluated; lam is defined in
those normalized units.  Evaluation maps back transparently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError

# near-equal LOOCV errors count as a tie resolved toward heavier smoothing
_TIE_REL = 1e-9


@dataclass(frozen=True)
class TpsSurface:
    centers: np.ndarray        # n x 2, original units (meters)
    coeff_poly: np.ndarray     # (c0, c_x, c_y) in normalized units
    coeff_kernel: np.ndarray   # c_j, length n
    lam: float
    origin: np.ndarray         # normalization offset (x0, y0)
    scale: float               # normalization scale, same for x and y
    fit_residual: np.ndarray   # z_j - W(x_j, y_j) per point

    @property
    def n_centers(self) -> int:
        return self.centers.shape[0]


def _normalize(points):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != 2:
        raise ValidationError("points must be n x 2")
    origin = points.min(axis=0)
    extent = points.max(axis=0) - origin
    scale = float(max(extent.max(), np.finfo(float).tiny))
    return (points - origin) / scale, origin, scale


def _kernel_matrix(eval_pts, centers):
    """r^2 ln r between every (evaluation point, center) pair; 0 at r = 0."""
    d2 = ((eval_pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    out = np.zeros_like(d2)
    nz = d2 > 0
    out[nz] = 0.5 * d2[nz] * np.log(d2[nz])
    return out


def fit_tps(points, values, lam: float) -> TpsSurface:
    """Fit one smoothed thin-plate-spline surface.

    Solves the saddle system

        [P  K + lam I] [c_poly  ]   [z]
        [0  P^T      ] [c_kernel] = [0]

    with P = [1 x y] rows and K the kernel matrix between centers.
    """
    if lam < 0:
        raise ValidationError("smoothing parameter must be nonnegative")
    values = np.asarray(values, dtype=float).ravel()
    pts_n, origin, scale = _normalize(points)
    n = pts_n.shape[0]
    if n < 3:
        raise ValidationError("need at least 3 points")
    if values.size != n:
        raise ValidationError("values length must match point count")

    P = np.column_stack([np.ones(n), pts_n])
    if np.linalg.matrix_rank(P) < 3:
        raise NumericalError("collinear points: plane part of the spline is degenerate")
    K = _kernel_matrix(pts_n, pts_n)

    X = np.zeros((n + 3, n + 3))
    X[:n, :3] = P
    X[:n, 3:] = K + lam * np.eye(n)
    X[n:, 3:] = P.T
    rhs = np.concatenate([values, np.zeros(3)])
    try:
        coeff = np.linalg.solve(X, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"singular spline system (condition number {np.linalg.cond(X):.3e})"
        ) from exc
    resid = np.linalg.norm(X @ coeff - rhs)
    if not np.all(np.isfinite(coeff)) or resid > 1e-6 * max(np.linalg.norm(rhs), 1e-300):
        raise NumericalError(
            f"spline system solved inaccurately (condition number {np.linalg.cond(X):.3e})"
        )

    surface = TpsSurface(
        centers=np.atleast_2d(np.asarray(points, dtype=float)).copy(),
        coeff_poly=coeff[:3].copy(),
        coeff_kernel=coeff[3:].copy(),
        lam=float(lam),
        origin=origin,
        scale=scale,
        fit_residual=values - _eval_normalized(coeff, pts_n, pts_n),
    )
    return surface


def _eval_normalized(coeff, eval_pts_n, centers_n):
    K = _kernel_matrix(eval_pts_n, centers_n)
    return coeff[0] + eval_pts_n @ coeff[1:3] + K @ coeff[3:]


def eval_tps(surface: TpsSurface, point) -> float:
    """Surface value at one (x, y) in original units."""
    p = (np.asarray(point, dtype=float) - surface.origin) / surface.scale
    centers_n = (surface.centers - surface.origin) / surface.scale
    coeff = np.concatenate([surface.coeff_poly, surface.coeff_kernel])
    return float(_eval_normalized(coeff, p[None, :], centers_n)[0])


def eval_tps_grid(surface: TpsSurface, xs, ys) -> np.ndarray:
    """Surface values on the outer grid of xs and ys; shape (len(ys), len(xs))."""
    gx, gy = np.meshgrid(np.asarray(xs, float), np.asarray(ys, float))
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    pts_n = (pts - surface.origin) / surface.scale
    centers_n = (surface.centers - surface.origin) / surface.scale
    coeff = np.concatenate([surface.coeff_poly, surface.coeff_kernel])
    return _eval_normalized(coeff, pts_n, centers_n).reshape(gx.shape)


def eval_tps_gradient(surface: TpsSurface, point) -> np.ndarray:
    """Analytic (d/dx, d/dy) of the surface at one point, original units.

    d/dx of r^2 ln r is (x - x_j)(2 ln r + 1), with limit 0 at r = 0.
    """
    p = (np.asarray(point, dtype=float) - surface.origin) / surface.scale
    centers_n = (surface.centers - surface.origin) / surface.scale
    diff = p[None, :] - centers_n
    d2 = (diff ** 2).sum(axis=1)
    fac = np.zeros_like(d2)
    nz = d2 > 0
    fac[nz] = np.log(d2[nz]) + 1.0  # = 2 ln r + 1
    grad_n = surface.coeff_poly[1:3] + (surface.coeff_kernel * fac) @ diff
    return grad_n / surface.scale


def loocv_select(points, values, lam_grid):
    """Pick the smoothing parameter by leave-one-out cross validation.

    For each lam the surface is refit n times with one point held out and
    the mean squared prediction error at the held-out points is recorded.
    Returns (best lam, error array aligned with lam_grid).  Near-equal
    errors count as ties and resolve toward the larger lam.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    values = np.asarray(values, dtype=float).ravel()
    lam_grid = np.asarray(lam_grid, dtype=float).ravel()
    n = points.shape[0]
    if n < 5:
        raise ValidationError("LOOCV needs at least 5 points")
    if lam_grid.size == 0:
        raise ValidationError("empty smoothing-parameter grid")

    errors = np.full(lam_grid.size, np.nan)
    for a, lam in enumerate(lam_grid):
        sq = np.empty(n)
        ok = True
        for k in range(n):
            keep = np.arange(n) != k
            try:
                surf = fit_tps(points[keep], values[keep], lam)
            except NumericalError:
                ok = False  # leave-one-out subset collinear: flag this lam
                break
            sq[k] = (values[k] - eval_tps(surf, points[k])) ** 2
        if ok:
            errors[a] = sq.mean()

    if np.all(np.isnan(errors)):
        raise NumericalError("every leave-one-out subset was degenerate")
    best = np.nanmin(errors)
    tol = _TIE_REL * max(best, float(np.mean(values**2)) * _TIE_REL, np.finfo(float).tiny)
    tied = np.where(np.nan_to_num(errors, nan=np.inf) <= best + tol)[0]
    return float(lam_grid[tied[np.argmax(lam_grid[tied])]]), errors


def interpolate_mode_shapes(shape_matrix, sensor_coords, lam_grid):
    """Fit one smoothed surface per mode-shape column.

    Smoothing is selected independently per column via LOOCV; the returned
    list is ordered like the columns.
    """
    shape_matrix = np.atleast_2d(np.asarray(shape_matrix, dtype=float))
    if not np.all(np.isfinite(shape_matrix)):
        raise ValidationError("mode-shape matrix contains non-finite entries")
    surfaces = []
    for i in range(shape_matrix.shape[1]):
        lam, _ = loocv_select(sensor_coords, shape_matrix[:, i], lam_grid)
        surfaces.append(fit_tps(sensor_coords, shape_matrix[:, i], lam))
    return surfaces
