"""Model files: one structured text document per identified model.

Field order is fixed (n_m, n_rb, omega2, zeta, R, sensor_coords, L_s,
surfaces) and reals carry 17 significant digits, so writing the same model
twice produces byte-identical files and read(write(m)) restores every
float bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .modal import ModalModel, PositionDependentModel
from .textio import read_kv_file, write_kv_file
from .tps import TpsSurface


def _surface_record(s: TpsSurface):
    return [
        s.lam,
        [float(s.origin[0]), float(s.origin[1])],
        s.scale,
        s.centers.tolist(),
        s.coeff_poly.tolist(),
        s.coeff_kernel.tolist(),
        s.fit_residual.tolist(),
    ]


def _surface_from_record(rec) -> TpsSurface:
    try:
        lam, origin, scale, centers, poly, kernel, resid = rec
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"malformed surface record: {exc}") from exc
    return TpsSurface(
        centers=np.asarray(centers, dtype=float),
        coeff_poly=np.asarray(poly, dtype=float),
        coeff_kernel=np.asarray(kernel, dtype=float),
        lam=float(lam),
        origin=np.asarray(origin, dtype=float),
        scale=float(scale),
        fit_residual=np.asarray(resid, dtype=float),
    )


@dataclass
class ModelDocument:
    """Contents of a model file: the sampled model plus optional surfaces."""

    model: ModalModel
    surfaces: list | None = None
    domain: tuple | None = None

    def to_position_dependent(self) -> PositionDependentModel:
        if not self.surfaces:
            raise ValidationError("model file has no shape surfaces; run the interpolation stage")
        return PositionDependentModel(
            omega2=self.model.omega2,
            zeta=self.model.zeta,
            input_gains=self.model.input_gains,
            surfaces=self.surfaces,
            domain=self.domain,
            n_rigid=self.model.n_rigid,
        )


def write_model_file(path, doc: ModelDocument):
    m = doc.model
    pairs = [
        ("n_m", m.n_modes),
        ("n_rb", m.n_rigid),
        ("omega2", m.omega2),
        ("zeta", m.zeta),
        ("R", m.input_gains),
        ("sensor_coords", m.sensor_coords),
        ("L_s", m.mode_shapes),
        ("surfaces", [_surface_record(s) for s in (doc.surfaces or [])]),
    ]
    if doc.domain is not None:
        pairs.append(("domain", list(doc.domain)))
    write_kv_file(path, pairs)


def read_model_file(path) -> ModelDocument:
    data = read_kv_file(path)
    required = ["n_m", "n_rb", "omega2", "zeta", "R", "sensor_coords", "L_s"]
    missing = [k for k in required if k not in data]
    if missing:
        raise ValidationError(f"model file {path} missing fields: {missing}")
    model = ModalModel(
        omega2=np.asarray(data["omega2"], dtype=float),
        zeta=np.asarray(data["zeta"], dtype=float),
        mode_shapes=np.asarray(data["L_s"], dtype=float),
        input_gains=np.asarray(data["R"], dtype=float),
        sensor_coords=np.asarray(data["sensor_coords"], dtype=float),
        n_rigid=int(data["n_rb"]),
    )
    if model.n_modes != int(data["n_m"]):
        raise ValidationError("n_m field disagrees with omega2 length")
    surfaces = [_surface_from_record(r) for r in data.get("surfaces", [])] or None
    if surfaces is not None and len(surfaces) != model.n_modes:
        raise ValidationError("surface count must equal mode count")
    domain = tuple(data["domain"]) if "domain" in data else None
    return ModelDocument(model=model, surfaces=surfaces, domain=domain)
