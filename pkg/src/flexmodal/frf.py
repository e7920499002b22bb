"""Nonparametric FRF estimation from periodic closed-loop experiments.

The estimation chain is: design random-phase multisines, apply them one
input at a time, average DFT ratios over steady-state periods and over
phase realizations (variance from the realization scatter), convert the
closed-loop estimate to the open-loop response by inverting the injected-
to-realized input block, and compensate the hold delay so the remaining
modeling can happen in continuous time.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericalError, ValidationError
from .textio import parse_float_cell, read_table, write_table

OUTPUT_TAGS = ("z_s", "u_c")
INPUT_TAGS = ("r_uc", "u_nc", "u_c")


@dataclass(frozen=True)
class MultisineSpec:
    """Flat random-phase multisine on a set of DFT bins."""

    bins: tuple                 # excited DFT bin indices of one period
    amplitude: float
    period_length: int
    sample_rate: float
    phase_seed: int = 0

    def __post_init__(self):
        bins = tuple(int(b) for b in self.bins)
        object.__setattr__(self, "bins", bins)
        if len(bins) == 0:
            raise ValidationError("need at least one excited bin")
        if len(set(bins)) != len(bins):
            raise ValidationError("excited bins must be unique")
        if min(bins) < 1 or max(bins) >= self.period_length / 2:
            raise ValidationError("excited bins must lie strictly below Nyquist")
        if self.amplitude <= 0:
            raise ValidationError("amplitude must be positive")

    @property
    def omega(self) -> np.ndarray:
        """Excited angular frequencies, rad/s."""
        return 2.0 * np.pi * self.sample_rate * np.asarray(self.bins) / self.period_length


def design_multisine(spec: MultisineSpec, realization=0) -> np.ndarray:
    """One period of the multisine; phases drawn from (seed, realization).

    ``realization`` may be an int or a tuple of ints (experiment index,
    realization index) so independent experiments get independent phases.
    """
    key = (spec.phase_seed,) + tuple(int(x) for x in np.atleast_1d(realization))
    rng = np.random.default_rng(np.random.SeedSequence(key))
    phases = rng.uniform(0.0, 2.0 * np.pi, len(spec.bins))
    n = np.arange(spec.period_length)
    k = np.asarray(spec.bins)[:, None]
    x = spec.amplitude * np.cos(2.0 * np.pi * k * n[None, :] / spec.period_length
                                + phases[:, None])
    return x.sum(axis=0)


def crest_factor(signal) -> float:
    signal = np.asarray(signal, dtype=float)
    return float(np.abs(signal).max() / np.sqrt(np.mean(signal**2)))


@dataclass
class FrfDataset:
    """Complex response samples on an ascending excited-frequency grid.

    variance holds the per-entry sample variance over phase realizations;
    with a single realization it is zero and flagged unusable via
    ``n_realizations``.
    """

    omega: np.ndarray            # m, rad/s, strictly ascending
    response: np.ndarray         # m x p x q complex
    variance: np.ndarray         # m x p x q, >= 0
    output_labels: list
    input_labels: list
    output_tags: list = field(default_factory=list)
    input_tags: list = field(default_factory=list)
    n_realizations: int = 1

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float).ravel()
        self.response = np.asarray(self.response, dtype=complex)
        self.variance = np.asarray(self.variance, dtype=float)
        m, p, q = self.response.shape
        if self.omega.size != m:
            raise ValidationError("frequency grid inconsistent with response array")
        if np.any(np.diff(self.omega) <= 0):
            raise ValidationError("frequency grid must be strictly ascending")
        if self.variance.shape != (m, p, q):
            raise ValidationError("variance array must match response shape")
        if np.any(self.variance < 0):
            raise ValidationError("variance must be nonnegative")
        if not (np.all(np.isfinite(self.variance)) and np.all(np.isfinite(self.response))):
            raise ValidationError("non-finite FRF data")
        if len(self.output_labels) != p or len(self.input_labels) != q:
            raise ValidationError("channel labels inconsistent with response shape")
        if not self.output_tags:
            self.output_tags = ["z_s"] * p
        if not self.input_tags:
            self.input_tags = ["u_nc"] * q
        if len(self.output_tags) != p or len(self.input_tags) != q:
            raise ValidationError("partition tags inconsistent with response shape")
        for t in self.output_tags:
            if t not in OUTPUT_TAGS:
                raise ValidationError(f"unknown output tag {t!r}")
        for t in self.input_tags:
            if t not in INPUT_TAGS:
                raise ValidationError(f"unknown input tag {t!r}")

    @property
    def n_points(self) -> int:
        return self.omega.size

    @property
    def n_outputs(self) -> int:
        return self.response.shape[1]

    @property
    def n_inputs(self) -> int:
        return self.response.shape[2]

    def output_indices(self, tag: str) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.output_tags) == tag)

    def input_indices(self, tag: str) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.input_tags) == tag)

    def subset(self, outputs=None, inputs=None) -> "FrfDataset":
        """Restrict to a subset of channels (indices or labels)."""
        rows = self._resolve(outputs, self.output_labels) if outputs is not None \
            else np.arange(self.n_outputs)
        cols = self._resolve(inputs, self.input_labels) if inputs is not None \
            else np.arange(self.n_inputs)
        return FrfDataset(
            omega=self.omega,
            response=self.response[:, rows][:, :, cols],
            variance=self.variance[:, rows][:, :, cols],
            output_labels=[self.output_labels[i] for i in rows],
            input_labels=[self.input_labels[j] for j in cols],
            output_tags=[self.output_tags[i] for i in rows],
            input_tags=[self.input_tags[j] for j in cols],
            n_realizations=self.n_realizations,
        )

    @staticmethod
    def _resolve(sel, labels):
        out = []
        for s in sel:
            if isinstance(s, str):
                if s not in labels:
                    raise ValidationError(f"unknown channel {s!r}")
                out.append(labels.index(s))
            else:
                out.append(int(s))
        return np.asarray(out, dtype=int)


def _input_sort_key(name: str):
    kind, _, idx = name.partition(":")
    return (0 if kind == "r_uc" else 1, int(idx) if idx else 0)


def etfe_robust(records, spec: MultisineSpec) -> FrfDataset:
    """Closed-loop ETFE with variance from the robust multisine method.

    Records are grouped by excited input; each group contributes one
    response column.  The first period of every record is discarded as
    transient, the remaining periods are averaged as DFT ratios, and the
    scatter of those per-realization averages gives the variance (zero and
    flagged when only one realization exists).
    """
    records = list(records)
    if not records:
        raise ValidationError("no experiment records")
    n0 = spec.period_length
    groups: dict = {}
    channels = None
    for rec in records:
        if rec.period_length != n0:
            raise ValidationError("record period length inconsistent with the multisine")
        if rec.n_periods < 2:
            raise ValidationError("need at least 2 periods (first one is discarded)")
        ch = [c for c in rec.channels if c != "injected"]
        if channels is None:
            channels = ch
        elif ch != channels:
            raise ValidationError("records disagree on channel layout")
        groups.setdefault(rec.excited_input, []).append(rec)

    input_names = sorted(groups, key=_input_sort_key)
    bins = np.asarray(spec.bins)
    p = len(channels)
    m = bins.size
    q = len(input_names)
    response = np.empty((m, p, q), dtype=complex)
    variance = np.zeros((m, p, q))
    n_real = min(len(g) for g in groups.values())

    for col, name in enumerate(input_names):
        per_realization = []
        for rec in groups[name]:
            inj = rec.channel("injected")
            outs = np.column_stack([rec.channel(c) for c in channels])
            ratios = np.zeros((m, p), dtype=complex)
            n_avg = rec.n_periods - 1
            for period in range(1, rec.n_periods):
                sl = slice(period * n0, (period + 1) * n0)
                U = np.fft.fft(inj[sl])[bins]
                if np.any(np.abs(U) < 1e-12 * spec.amplitude * n0):
                    raise ValidationError(
                        f"record for {name} carries no energy at an excited bin")
                Y = np.fft.fft(outs[sl], axis=0)[bins, :]
                ratios += Y / U[:, None]
            per_realization.append(ratios / n_avg)
        stack = np.stack(per_realization)                  # R x m x p
        response[:, :, col] = stack.mean(axis=0)
        if stack.shape[0] > 1:
            variance[:, :, col] = (
                np.abs(stack - stack.mean(axis=0)) ** 2
            ).sum(axis=0) / (stack.shape[0] - 1)

    tags = ["u_c" if c.startswith("uc") else "z_s" for c in channels]
    in_tags = [n.partition(":")[0] for n in input_names]
    return FrfDataset(
        omega=spec.omega, response=response, variance=variance,
        output_labels=list(channels), input_labels=input_names,
        output_tags=tags, input_tags=in_tags, n_realizations=n_real,
    )


def closed_to_open(cl: FrfDataset, keep_inputs=None) -> FrfDataset:
    """Convert the closed-loop ETFE into the open-loop response.

    Per frequency the open-loop estimate is

        G = [P_z<-r  P_z<-unc] [[P_uc<-r  P_uc<-unc]  ^-1
                                [0        I        ]]

    where the u_c rows are the recorded realized control inputs.  Pass
    ``keep_inputs`` to restrict the resulting input set afterwards (for
    example dropping in-plane directions).
    """
    z_rows = cl.output_indices("z_s")
    uc_rows = cl.output_indices("u_c")
    r_cols = cl.input_indices("r_uc")
    nc_cols = cl.input_indices("u_nc")
    n_c, n_nc = uc_rows.size, nc_cols.size
    if r_cols.size != n_c:
        raise ValidationError(
            f"need as many injection columns ({r_cols.size}) as realized control "
            f"input rows ({n_c})")
    if z_rows.size == 0:
        raise ValidationError("no z_s output rows")

    m = cl.n_points
    q = n_c + n_nc
    G = np.empty((m, z_rows.size, q), dtype=complex)
    V = np.zeros((m, z_rows.size, q))
    top = np.concatenate([r_cols, nc_cols])
    P_z = cl.response[:, z_rows][:, :, top]
    P_z_var = cl.variance[:, z_rows][:, :, top]
    for k in range(m):
        M = np.zeros((q, q), dtype=complex)
        M[:n_c, :] = cl.response[k][uc_rows][:, top]
        M[n_c:, n_c:] = np.eye(n_nc)
        cond = np.linalg.cond(M)
        if not np.isfinite(cond) or cond > 1e12:
            raise NumericalError(
                f"singular inner block at omega={cl.omega[k]:.6g} rad/s "
                f"(condition number {cond:.3e})")
        Minv = np.linalg.inv(M)
        G[k] = P_z[k] @ Minv
        # first-order propagation treating the inner block as exact
        V[k] = P_z_var[k] @ (np.abs(Minv) ** 2)

    in_labels = [cl.input_labels[j] for j in r_cols] + [cl.input_labels[j] for j in nc_cols]
    ds = FrfDataset(
        omega=cl.omega, response=G, variance=V,
        output_labels=[cl.output_labels[i] for i in z_rows],
        input_labels=in_labels,
        output_tags=["z_s"] * z_rows.size,
        input_tags=["u_c"] * n_c + ["u_nc"] * n_nc,
        n_realizations=cl.n_realizations,
    )
    if keep_inputs is not None:
        ds = ds.subset(inputs=keep_inputs)
    return ds


def compensate_delay(frf: FrfDataset, tau: float) -> FrfDataset:
    """Remove a pure delay of ``tau`` seconds: multiply by exp(+j omega tau)."""
    if tau < 0:
        raise ValidationError("delay must be nonnegative")
    return replace(
        frf,
        response=frf.response * np.exp(1j * frf.omega * tau)[:, None, None],
        variance=frf.variance.copy(),
        output_labels=list(frf.output_labels), input_labels=list(frf.input_labels),
        output_tags=list(frf.output_tags), input_tags=list(frf.input_tags),
    )


def first_resonance_index(frf: FrfDataset) -> int:
    """Grid index of the first flexible resonance peak.

    Works on the rigid-body-flattened magnitude (median |G| * omega^2,
    lightly smoothed): the first point that rises a factor 3 above the
    low-frequency baseline, advanced to its local maximum.  Noise-level
    wiggles stay far below that prominence.  Falls back to the global
    maximum when nothing crosses the threshold.
    """
    flat = np.median(np.abs(frf.response), axis=(1, 2)) * frf.omega**2
    if flat.size >= 5:
        kernel = np.ones(3) / 3.0
        flat = np.convolve(flat, kernel, mode="same")
    baseline = np.median(flat[: max(2, frf.n_points // 4)])
    above = np.flatnonzero(flat >= 3.0 * baseline)
    if above.size == 0:
        return int(np.argmax(flat))
    k = int(above[0])
    while k + 1 < flat.size and flat[k + 1] > flat[k]:
        k += 1
    return k


def estimate_delay(frf: FrfDataset, band=None, n_channels: int = 8) -> float:
    """Estimate the residual hold delay from the phase slope.

    By default the regression runs over the rigid-body-dominated band below
    the first flexible resonance, where the plant phase is flat (a constant
    +-180 degrees per channel) and any linear trend is the delay.  A
    (omega_lo, omega_hi) band can override that.  The slope is pooled over
    the highest-coherence channels with per-bin magnitude-to-variance
    weights, which keeps the estimate usable on noisy data.
    """
    if band is None:
        k_res = first_resonance_index(frf)
        hi = 0.25 * frf.omega[k_res]
        sel = frf.omega <= hi
        if sel.sum() < 3:
            sel = frf.omega <= frf.omega[max(3, frf.n_points // 4)]
    else:
        sel = (frf.omega >= band[0]) & (frf.omega <= band[1])
    if sel.sum() < 2:
        raise ValidationError("delay-estimation band holds fewer than 2 grid points")

    mag2 = np.abs(frf.response) ** 2
    floor = 1e-12 * np.median(mag2)
    coh = mag2 / (frf.variance + floor)
    score = np.mean(coh[sel], axis=0).ravel()
    n_best = min(n_channels, score.size)
    best = np.argsort(score)[::-1][:n_best]

    omega = frf.omega[sel]
    num = 0.0
    den = 0.0
    for flat_idx in best:
        i, j = np.unravel_index(flat_idx, frf.response.shape[1:])
        phase = np.unwrap(np.angle(frf.response[sel, i, j]))
        w = coh[sel, i, j]
        wsum = w.sum()
        om_c = omega - (w * omega).sum() / wsum
        ph_c = phase - (w * phase).sum() / wsum
        num += np.sum(w * om_c * ph_c)
        den += np.sum(w * om_c**2)
    slope = num / den
    return float(max(-slope, 0.0))


# ---------------------------------------------------------------------------
# FRF file

def write_frf_file(path, ds: FrfDataset):
    meta = {
        "omega_count": ds.n_points,
        "output_labels": list(ds.output_labels),
        "output_tags": list(ds.output_tags),
        "input_labels": list(ds.input_labels),
        "input_tags": list(ds.input_tags),
        "n_realizations": ds.n_realizations,
    }
    rows = []
    for k in range(ds.n_points):
        for i in range(ds.n_outputs):
            for j in range(ds.n_inputs):
                rows.append([
                    k, ds.output_labels[i], ds.input_labels[j], ds.omega[k],
                    ds.response[k, i, j].real, ds.response[k, i, j].imag,
                    ds.variance[k, i, j],
                ])
    write_table(path, ["k", "output", "input", "omega", "re", "im", "variance"], rows,
                meta=meta)


def read_frf_file(path) -> FrfDataset:
    meta, columns, rows = read_table(path)
    for key in ("output_labels", "input_labels", "output_tags", "input_tags"):
        if key not in meta:
            raise ValidationError(f"FRF file {path} missing {key}")
    out_labels = list(meta["output_labels"])
    in_labels = list(meta["input_labels"])
    m = int(meta["omega_count"])
    p, q = len(out_labels), len(in_labels)
    omega = np.full(m, np.nan)
    response = np.zeros((m, p, q), dtype=complex)
    variance = np.zeros((m, p, q))
    seen = np.zeros((m, p, q), dtype=bool)
    for row in rows:
        k = int(row[0])
        i = out_labels.index(row[1])
        j = in_labels.index(row[2])
        omega[k] = parse_float_cell(row[3], f"omega at row k={k}")
        response[k, i, j] = complex(parse_float_cell(row[4]), parse_float_cell(row[5]))
        variance[k, i, j] = parse_float_cell(row[6])
        seen[k, i, j] = True
    if not seen.all():
        raise ValidationError(f"FRF file {path} is missing entries")
    return FrfDataset(
        omega=omega, response=response, variance=variance,
        output_labels=out_labels, input_labels=in_labels,
        output_tags=list(meta["output_tags"]), input_tags=list(meta["input_tags"]),
        n_realizations=int(meta.get("n_realizations", 1)),
    )
