"""Declarative pipeline configuration, read and written in the same
key/value text syntax as the model files."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ValidationError
from .textio import read_kv_file, write_kv_file

_FREQS = (62.0, 85.0, 110.0, 140.0, 175.0, 215.0, 260.0, 310.0, 365.0)
_RATIOS = (0.030, 0.028, 0.026, 0.024, 0.022, 0.021, 0.020, 0.019, 0.018)


@dataclass
class PipelineConfig:
    # bench / experiment generation
    seed: int = 0
    plate_size: tuple = (0.30, 0.24)
    n_flex: int = 9
    flex_freqs_hz: tuple = _FREQS
    damping_ratios: tuple = _RATIOS
    snr_db: float | None = 40.0
    sample_rate: float = 4096.0
    period_length: int = 2048
    n_periods: int = 4
    n_realizations: int = 8
    amplitude: float = 1.0
    excited_band_hz: tuple = (4.0, 440.0)
    n_excited_bins: int = 40         # log-spaced part, below the linear band
    excited_linear_from_hz: float = 50.0
    excited_linear_step_bins: int = 2
    controller_bandwidth_hz: float = 4.0
    include_inplane: bool = True
    inplane_realizations: int = 1

    # identification
    n_m: int = 14
    n_rb: int = 3
    fit_outputs: tuple = (1, 3, 9)
    w_max: float | str = "auto"
    i_sk: int = 20
    i_gn: int = 100
    i_gn_mod: int = 100
    delay: float | str = "estimate"
    rho_keep: float = 0.01

    # interpolation
    lambda_min: float = 1e-8
    lambda_max: float = 1e2
    lambda_count: int = 25
    grid_n: int = 20
    domain: tuple | None = None

    # position evaluation
    eval_freqs_hz: tuple = (10.0, 50.0, 100.0)

    def lambda_grid(self) -> np.ndarray:
        return np.logspace(np.log10(self.lambda_min), np.log10(self.lambda_max),
                           self.lambda_count)

    def validate(self):
        if self.n_flex < 0:
            raise ValidationError("n_flex must be nonnegative")
        if len(self.flex_freqs_hz) < self.n_flex:
            raise ValidationError("need a base frequency per flexible mode")
        if self.n_periods < 2:
            raise ValidationError("need at least 2 periods per record")
        if self.n_realizations < 1 or self.inplane_realizations < 1:
            raise ValidationError("realization counts must be positive")
        if not 0 < self.excited_band_hz[0] < self.excited_band_hz[1]:
            raise ValidationError("excited band must be positive and ascending")
        if self.excited_band_hz[1] >= self.sample_rate / 2:
            raise ValidationError("excited band reaches Nyquist")
        if not 0 <= self.n_rb < self.n_m:
            raise ValidationError("need 0 <= n_rb < n_m")
        if len(self.fit_outputs) < 1:
            raise ValidationError("need at least one fit output")
        if isinstance(self.w_max, str) and self.w_max != "auto":
            raise ValidationError("w_max must be a number or 'auto'")
        if isinstance(self.delay, str) and self.delay != "estimate":
            raise ValidationError("delay must be a number or 'estimate'")
        if self.i_sk < 0 or self.i_gn < 0 or self.i_gn_mod < 0:
            raise ValidationError("iteration counts must be nonnegative")
        if not 0 < self.lambda_min <= self.lambda_max:
            raise ValidationError("smoothing grid must be positive and ordered")
        if self.lambda_count < 1:
            raise ValidationError("smoothing grid needs at least one point")
        if self.grid_n < 2:
            raise ValidationError("surface export grid needs at least 2 points")
        return self


_TUPLE_FIELDS = {"plate_size", "flex_freqs_hz", "damping_ratios", "excited_band_hz",
                 "fit_outputs", "domain", "eval_freqs_hz"}


def write_config(path, config: PipelineConfig):
    pairs = []
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = list(value)
        pairs.append((f.name, value))
    write_kv_file(path, pairs)


def read_config(path) -> PipelineConfig:
    if not os.path.exists(path):
        raise ValidationError(f"config file {path} does not exist")
    data = read_kv_file(path)
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _TUPLE_FIELDS and value is not None:
            value = tuple(value)
        kwargs[key] = value
    return PipelineConfig(**kwargs).validate()
