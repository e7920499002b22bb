"""Pipeline stages behind the command-line interface.

Every stage reads its inputs from files written by the previous stage and
writes its own artifacts before the next stage runs, so a rerun that starts
at any stage checkpoint reproduces the straight-through result bit for bit.
"""

from __future__ import annotations

import os

import numpy as np

from .config import PipelineConfig
from .errors import NumericalError, ValidationError
from .extract import lmfd_to_modal, write_prune_table
from .frf import (FrfDataset, MultisineSpec, closed_to_open, compensate_delay,
                  design_multisine, estimate_delay, etfe_robust, read_frf_file,
                  write_frf_file)
from .lmfd import build_structure, read_lmfd_file, write_lmfd_file
from .modal import ModalModel, eval_at_position, frf_eval
from .modelio import ModelDocument, read_model_file, write_model_file
from .solver import (LmfdParametrization, ModalParametrization, SolveReport,
                     WeightingSpec, cost, default_w_max, extend_outputs, lm_refine,
                     sk_solve, weighting_inv_truncated)
from .synth import (ExperimentRecord, PlateSpec, design_rigid_pd, make_plate_model,
                    read_record_file, write_record_file, _simulate_batch)
from .textio import read_kv_file, read_table, write_kv_file, write_table
from .tps import eval_tps_grid, fit_tps, loocv_select

IDENTIFY_STAGES = ("weighting", "sk", "lm", "transform", "modal", "extend")

OOP_INPUTS = [f"r_uc:{k}" for k in range(4)] + [f"u_nc:{k}" for k in range(3)]


def _plate_spec(config: PipelineConfig) -> PlateSpec:
    return PlateSpec(
        size=tuple(config.plate_size),
        n_flex=config.n_flex,
        flex_freqs_hz=tuple(config.flex_freqs_hz),
        damping_ratios=tuple(config.damping_ratios),
        snr_db=config.snr_db,
        seed=config.seed,
    )


def excited_bins(config: PipelineConfig) -> tuple:
    """Excited DFT bins: log-spaced through the rigid-body band, then every
    few bins linearly through the resonance band so the upper modes get as
    many data points as the lower ones."""
    df = config.sample_rate / config.period_length
    lo = max(1, int(round(config.excited_band_hz[0] / df)))
    hi = int(round(config.excited_band_hz[1] / df))
    mid = min(int(round(config.excited_linear_from_hz / df)), hi)
    if hi >= config.period_length / 2:
        raise ValidationError("excited band reaches Nyquist")
    log_part = np.round(np.logspace(np.log10(lo), np.log10(max(mid, lo + 1)),
                                    config.n_excited_bins)).astype(int)
    lin_part = np.arange(mid, hi + 1, config.excited_linear_step_bins, dtype=int)
    raw = np.unique(np.concatenate([log_part, lin_part]))
    return tuple(int(b) for b in raw)


def multisine_spec(config: PipelineConfig) -> MultisineSpec:
    return MultisineSpec(
        bins=excited_bins(config), amplitude=config.amplitude,
        period_length=config.period_length, sample_rate=config.sample_rate,
        phase_seed=config.seed,
    )


def _experiment_inputs(config: PipelineConfig):
    names = [f"r_uc:{k}" for k in range(4)]
    if config.include_inplane:
        names += [f"r_uc:{k}" for k in range(4, 8)]
    names += [f"u_nc:{k}" for k in range(3)]
    return names


def _noise_sigma(model, controller, mspec, snr_db, input_names) -> float:
    """Per-channel noise level: mean excited-band sensor power over the
    out-of-plane experiments, scaled down by the requested ratio.

    Uses a continuous-time closed-loop response probe, which is plenty for
    setting a noise floor."""
    if snr_db is None:
        return 0.0
    omega = mspec.omega
    G = frf_eval(model, omega)                       # p x n_act x m
    p = model.n_outputs
    kp = np.diag(controller.kp)
    kd = np.diag(controller.kd)
    ctrl = list(controller.actuator_indices)
    sens = list(controller.sensor_indices)
    ident = [a for a in range(model.n_inputs) if a not in ctrl]
    power = []
    for name in input_names:
        kind, _, idx = name.partition(":")
        k = int(idx)
        if kind == "r_uc" and k >= len(ctrl):
            continue  # in-plane: no out-of-plane response
        per_sensor = np.zeros(p)
        for b, w in enumerate(omega):
            Gm = G[:, :, b]
            K = controller.actuator_map @ (kp + 1j * w * kd) @ controller.sensor_decouple
            Gc = Gm[:, ctrl]                         # p x 4
            loop = np.linalg.inv(np.eye(len(ctrl)) + K @ Gc[sens, :])
            if kind == "r_uc":
                H = Gc @ loop[:, k]
            else:
                Gnc = Gm[:, ident[k]]
                H = Gnc - Gc @ (loop @ (K @ Gnc[sens]))
            per_sensor += np.abs(H) ** 2 * mspec.amplitude**2 / 2.0
        power.append(per_sensor.mean())
    mean_power = float(np.mean(power))
    return float(np.sqrt(mean_power) * 10.0 ** (-snr_db / 20.0))


def synthesize_experiments(config: PipelineConfig):
    """Ground-truth model plus simulated records, all in memory.

    Returns (model, spec, controller, multisine spec, records).
    """
    config.validate()
    spec = _plate_spec(config)
    model = make_plate_model(spec)
    controller = design_rigid_pd(model, spec, config.sample_rate,
                                 bandwidth_hz=config.controller_bandwidth_hz)
    mspec = multisine_spec(config)
    input_names = _experiment_inputs(config)
    sigma = _noise_sigma(model, controller, mspec, config.snr_db, input_names)

    records = []
    n = config.period_length
    total = n * config.n_periods
    channels = [f"z{j:02d}" for j in range(model.n_outputs)] + \
               [f"uc{k}" for k in range(8)] + ["injected"]
    for e, name in enumerate(input_names):
        n_real = config.n_realizations
        if name.startswith("r_uc:") and int(name.partition(":")[2]) >= 4:
            n_real = config.inplane_realizations
        injections = np.column_stack([
            np.tile(design_multisine(mspec, realization=(e, r)), config.n_periods)
            for r in range(n_real)
        ])
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, 7000 + e)))
        z, uc = _simulate_batch(model, injections, name, config.sample_rate,
                                controller, sigma, rng, n_inplane=4)
        for r in range(n_real):
            data = np.column_stack([z[:, :, r], uc[:, :, r], injections[:, r]])
            records.append(ExperimentRecord(
                sample_rate=config.sample_rate, data=data, channels=list(channels),
                n_periods=config.n_periods, period_length=n,
                excited_input=name, realization=r,
            ))
    return model, spec, controller, mspec, records


def estimate_frf(config: PipelineConfig, records) -> tuple:
    """Records to delay-compensated open-loop FRF; returns (closed, open, tau)."""
    mspec = multisine_spec(config)
    closed = etfe_robust(records, mspec)
    opened = closed_to_open(closed, keep_inputs=OOP_INPUTS)
    tau = estimate_delay(opened) if config.delay == "estimate" else float(config.delay)
    return closed, compensate_delay(opened, tau), tau


# ---------------------------------------------------------------------------
# commands

def cmd_synth(config: PipelineConfig, out_dir) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    rec_dir = os.path.join(out_dir, "records")
    os.makedirs(rec_dir, exist_ok=True)
    model, spec, controller, mspec, records = synthesize_experiments(config)
    model_path = os.path.join(out_dir, "model_true.txt")
    write_model_file(model_path, ModelDocument(model=model))
    paths = []
    for rec in records:
        name = rec.excited_input.replace(":", "") + f"_r{rec.realization:02d}.txt"
        path = os.path.join(rec_dir, name)
        write_record_file(path, rec)
        paths.append(path)
    return {"model": model_path, "records": paths}


def cmd_estimate(config: PipelineConfig, records_dir, out_dir) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    names = sorted(f for f in os.listdir(records_dir) if f.endswith(".txt"))
    if not names:
        raise ValidationError(f"no record files in {records_dir}")
    records = [read_record_file(os.path.join(records_dir, f)) for f in names]
    closed, opened, tau = estimate_frf(config, records)
    closed_path = os.path.join(out_dir, "frf_closed.txt")
    open_path = os.path.join(out_dir, "frf_open.txt")
    write_frf_file(closed_path, closed)
    write_frf_file(open_path, opened)
    write_kv_file(os.path.join(out_dir, "delay.txt"),
                  [("tau", tau), ("source", config.delay if isinstance(config.delay, str)
                                  else "config")])
    return {"frf_closed": closed_path, "frf_open": open_path, "tau": tau}


def _weighting_path(out_dir):
    return os.path.join(out_dir, "weighting.txt")


def _write_weighting(path, weighting: WeightingSpec):
    write_kv_file(path, [
        ("w_max", weighting.w_max if np.isfinite(weighting.w_max) else "inf"),
        ("provenance", weighting.provenance),
        ("shape", list(weighting.values.shape)),
        ("values", weighting.values),
    ])


def _read_weighting(path) -> WeightingSpec:
    data = read_kv_file(path)
    w_max = np.inf if data["w_max"] == "inf" else float(data["w_max"])
    values = np.asarray(data["values"], dtype=float)
    return WeightingSpec(values=values, w_max=w_max, provenance=data["provenance"])


def _sensor_coords(config: PipelineConfig) -> np.ndarray:
    return _plate_spec(config).sensor_coords


def _stage_weighting(config, frf_path, out_dir):
    frf = read_frf_file(frf_path)
    w_max = default_w_max(frf) if config.w_max == "auto" else float(config.w_max)
    weighting = weighting_inv_truncated(frf, w_max)
    _write_weighting(_weighting_path(out_dir), weighting)


def _stage_sk(config, frf_path, out_dir):
    frf = read_frf_file(frf_path)
    weighting = _read_weighting(_weighting_path(out_dir))
    rows = list(config.fit_outputs)
    sub = frf.subset(outputs=rows)
    w_sub = weighting.subset(rows)
    structure = build_structure(len(rows), frf.n_inputs, config.n_m, config.n_rb)
    report, model = sk_solve(structure, sub, w_sub, i_sk=config.i_sk)
    write_lmfd_file(os.path.join(out_dir, "lmfd_sk.txt"), model)
    _write_trace(out_dir, "sk", report.rows(), fresh=True)
    _append_report(out_dir, "sk", report, fresh=True)


def _stage_lm(config, frf_path, out_dir):
    frf = read_frf_file(frf_path)
    weighting = _read_weighting(_weighting_path(out_dir))
    rows = list(config.fit_outputs)
    sub = frf.subset(outputs=rows)
    w_sub = weighting.subset(rows)
    model = read_lmfd_file(os.path.join(out_dir, "lmfd_sk.txt"))
    param = LmfdParametrization(model.structure, model.basis)
    report, theta = lm_refine(model.theta, param, sub, w_sub, i_max=config.i_gn)
    write_lmfd_file(os.path.join(out_dir, "lmfd_lm.txt"), model.with_theta(theta))
    _write_trace(out_dir, "lm_lmfd", report.rows())
    _append_report(out_dir, "lm_lmfd", report)


def _stage_transform(config, frf_path, out_dir):
    frf = read_frf_file(frf_path)
    weighting = _read_weighting(_weighting_path(out_dir))
    rows = list(config.fit_outputs)
    sub = frf.subset(outputs=rows)
    w_sub = weighting.subset(rows)
    model = read_lmfd_file(os.path.join(out_dir, "lmfd_lm.txt"))
    coords = _sensor_coords(config)[rows]
    modal, info = lmfd_to_modal(model, sub, w_sub, coords, rho_keep=config.rho_keep)
    write_model_file(os.path.join(out_dir, "modal_init.txt"), ModelDocument(model=modal))
    write_prune_table(os.path.join(out_dir, "prune_table.txt"), info.prune_table)
    par = ModalParametrization(len(rows), frf.n_inputs, modal.n_modes, modal.n_rigid,
                               sub.omega)
    theta = par.pack(modal.mode_shapes, modal.input_gains, modal.omega2, modal.zeta)
    v_handoff = cost(theta, par, sub, w_sub)
    _write_trace(out_dir, "handoff", [[0, "handoff", v_handoff, 0.0, 1]])
    write_kv_file(os.path.join(out_dir, "transform_info.txt"), [
        ("handoff_cost", v_handoff),
        ("residue_fit_cost", info.residue_fit_cost),
        ("rank1_cost", info.rank1_cost),
        ("rank1_excess", info.rank1_excess),
        ("rank1_defects", info.rank1_defects),
        ("n_modes", modal.n_modes),
    ])


def _stage_modal(config, frf_path, out_dir):
    frf = read_frf_file(frf_path)
    weighting = _read_weighting(_weighting_path(out_dir))
    rows = list(config.fit_outputs)
    sub = frf.subset(outputs=rows)
    w_sub = weighting.subset(rows)
    doc = read_model_file(os.path.join(out_dir, "modal_init.txt"))
    modal = doc.model
    par = ModalParametrization(len(rows), frf.n_inputs, modal.n_modes, modal.n_rigid,
                               sub.omega)
    theta0 = par.pack(modal.mode_shapes, modal.input_gains, modal.omega2, modal.zeta)
    report, theta = lm_refine(theta0, par, sub, w_sub, i_max=config.i_gn_mod)
    shapes, gains, omega2, zeta = par.unpack(theta)
    refined = ModalModel(omega2=omega2, zeta=zeta, mode_shapes=shapes,
                         input_gains=gains, sensor_coords=modal.sensor_coords,
                         n_rigid=modal.n_rigid)
    write_model_file(os.path.join(out_dir, "modal_lm.txt"), ModelDocument(model=refined))
    _write_trace(out_dir, "lm_modal", report.rows())
    _append_report(out_dir, "lm_modal", report)


def _stage_extend(config, frf_path, out_dir):
    frf = read_frf_file(frf_path)
    weighting = _read_weighting(_weighting_path(out_dir))
    fit_rows = list(config.fit_outputs)
    rest = [i for i in range(frf.n_outputs) if i not in fit_rows]
    doc = read_model_file(os.path.join(out_dir, "modal_lm.txt"))
    modal = doc.model
    coords = _sensor_coords(config)
    if rest:
        sub = frf.subset(outputs=rest)
        w_sub = weighting.subset(rest)
        rows, resid = extend_outputs(modal.omega2, modal.zeta, modal.input_gains,
                                     sub, w_sub)
    else:
        rows = np.zeros((0, modal.n_modes))
        resid = np.zeros(0)
    shapes = np.empty((frf.n_outputs, modal.n_modes))
    shapes[fit_rows, :] = modal.mode_shapes
    shapes[rest, :] = rows
    full = ModalModel(omega2=modal.omega2, zeta=modal.zeta, mode_shapes=shapes,
                      input_gains=modal.input_gains, sensor_coords=coords,
                      n_rigid=modal.n_rigid)
    write_model_file(os.path.join(out_dir, "modal_full.txt"), ModelDocument(model=full))
    write_kv_file(os.path.join(out_dir, "extension_info.txt"),
                  [("extended_outputs", rest), ("residual_norms", resid)])


_STAGE_RUNNERS = {
    "weighting": _stage_weighting,
    "sk": _stage_sk,
    "lm": _stage_lm,
    "transform": _stage_transform,
    "modal": _stage_modal,
    "extend": _stage_extend,
}


def cmd_identify(config: PipelineConfig, frf_path, out_dir, stage: str | None = None) -> dict:
    """Run the staged identification, optionally resuming at ``stage``.

    Stages before the requested one must have left their artifacts in
    ``out_dir``; because every stage communicates through files only, the
    resumed run reproduces the straight-through result exactly.
    """
    os.makedirs(out_dir, exist_ok=True)
    if stage is not None and stage not in IDENTIFY_STAGES:
        raise ValidationError(f"unknown stage {stage!r}; choose from {IDENTIFY_STAGES}")
    start = 0 if stage is None else IDENTIFY_STAGES.index(stage)
    for name in IDENTIFY_STAGES[start:]:
        try:
            _STAGE_RUNNERS[name](config, frf_path, out_dir)
        except (ValidationError, NumericalError) as exc:
            raise type(exc)(f"[stage {name}] {exc}") from exc
    _assemble_trace(out_dir)
    flags = check_cost_trace(os.path.join(out_dir, "cost_trace.txt"))
    write_kv_file(os.path.join(out_dir, "trace_check.txt"),
                  [(k, v) for k, v in flags.items()])
    return {
        "model": os.path.join(out_dir, "modal_full.txt"),
        "trace": os.path.join(out_dir, "cost_trace.txt"),
        "trace_check": flags,
    }


_TRACE_ORDER = ("sk", "lm_lmfd", "handoff", "lm_modal")


def _write_trace(out_dir, stage, rows, fresh=False):
    # one segment file per stage: reruns from a checkpoint overwrite their
    # own segment and the assembled trace stays identical
    path = os.path.join(out_dir, f"trace_{stage}.txt")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iteration stage cost mu accepted\n")
        for it, st, v, mu, acc in rows:
            fh.write(f"{it} {st} {v:.17g} {mu:.17g} {acc}\n")


def _assemble_trace(out_dir):
    path = os.path.join(out_dir, "cost_trace.txt")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iteration stage cost mu accepted\n")
        for stage in _TRACE_ORDER:
            seg = os.path.join(out_dir, f"trace_{stage}.txt")
            if not os.path.exists(seg):
                continue
            with open(seg, "r", encoding="utf-8") as sf:
                next(sf)  # header
                fh.writelines(sf)
    return path


def _append_report(out_dir, stage, report: SolveReport, fresh=False):
    path = os.path.join(out_dir, f"report_{stage}.txt")
    write_kv_file(path, [
        ("stage", stage),
        ("best_cost", report.best_cost),
        ("termination", report.termination),
        ("iterations", report.n_iterations),
        ("oscillating", report.oscillating),
    ])


def read_trace(path):
    _, columns, rows = read_table(path)
    return [(int(r[0]), r[1], float(r[2]), float(r[3]), int(r[4])) for r in rows]


def check_cost_trace(path) -> dict:
    """Shape checks on the combined cost trace.

    The relinearized stage may oscillate (flagged, never failed); both
    damped stages must be nonincreasing; the transform handoff must record a
    finite cost; the final stage must end at or below the handoff.
    """
    trace = read_trace(path)
    by_stage = {}
    for it, stage, v, mu, acc in trace:
        by_stage.setdefault(stage, []).append(v)
    flags = {}
    flags["sk_oscillating"] = bool(np.any(np.diff(by_stage.get("sk", [0.0])) > 0))
    for stage in ("lm_lmfd", "lm_modal"):
        vals = by_stage.get(stage, [])
        if vals and np.any(np.diff(vals) > 0):
            raise NumericalError(f"accepted-step cost rose in stage {stage}")
        flags[f"{stage}_monotone"] = True
    if "handoff" in by_stage and "lm_lmfd" in by_stage:
        v_handoff = by_stage["handoff"][0]
        v_lmfd = min(by_stage["lm_lmfd"])
        if not np.isfinite(v_handoff):
            raise NumericalError("transform handoff recorded a non-finite cost")
        flags["handoff_cost_ratio"] = float(v_handoff / v_lmfd) if v_lmfd > 0 else np.inf
    if "lm_modal" in by_stage and "handoff" in by_stage:
        flags["modal_decrease"] = float(by_stage["handoff"][0] - min(by_stage["lm_modal"]))
        if flags["modal_decrease"] < 0:
            raise NumericalError("final stage ended above the handoff cost")
    return flags


def cmd_interp(config: PipelineConfig, model_path, out_dir) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    doc = read_model_file(model_path)
    model = doc.model
    lam_grid = config.lambda_grid()
    surfaces = []
    loocv_rows = []
    for i in range(model.n_modes):
        lam, errors = loocv_select(model.sensor_coords, model.mode_shapes[:, i], lam_grid)
        surfaces.append(fit_tps(model.sensor_coords, model.mode_shapes[:, i], lam))
        at_lam = errors[int(np.argmin(np.abs(lam_grid - lam)))]
        loocv_rows.append([i, lam, float(at_lam)])
    if config.domain is not None:
        domain = tuple(config.domain)
    else:
        c = model.sensor_coords
        domain = (float(c[:, 0].min()), float(c[:, 0].max()),
                  float(c[:, 1].min()), float(c[:, 1].max()))
    out_model = os.path.join(out_dir, "model_interp.txt")
    write_model_file(out_model, ModelDocument(model=model, surfaces=surfaces,
                                              domain=domain))
    grid_dir = os.path.join(out_dir, "grids")
    os.makedirs(grid_dir, exist_ok=True)
    xs = np.linspace(domain[0], domain[1], config.grid_n)
    ys = np.linspace(domain[2], domain[3], config.grid_n)
    grid_paths = []
    for i, surf in enumerate(surfaces):
        values = eval_tps_grid(surf, xs, ys)
        rows = []
        for a, y in enumerate(ys):
            for b, x in enumerate(xs):
                rows.append([x, y, values[a, b]])
        path = os.path.join(grid_dir, f"mode_{i:02d}.txt")
        write_table(path, ["x", "y", "z"], rows, meta={"mode": i, "grid_n": config.grid_n})
        grid_paths.append(path)
    write_table(os.path.join(out_dir, "loocv.txt"), ["mode", "lambda", "error"],
                loocv_rows)
    return {"model": out_model, "grids": grid_paths}


def cmd_eval(config: PipelineConfig, model_path, trajectory_path, out_dir) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    doc = read_model_file(model_path)
    pdm = doc.to_position_dependent()
    meta, columns, rows = read_table(trajectory_path)
    if columns[:3] != ["t", "x", "y"]:
        raise ValidationError("trajectory file must have columns: t x y")
    shape_rows = []
    frf_rows = []
    omega = 2.0 * np.pi * np.asarray(config.eval_freqs_hz, dtype=float)
    for r in rows:
        t, x, y = (float(v) for v in r[:3])
        shape = pdm.shape_row((x, y))
        shape_rows.append([t, x, y] + list(shape))
        if omega.size:
            resp = eval_at_position(pdm, (x, y), omega)
            for b, w in enumerate(omega):
                for j in range(resp.shape[1]):
                    frf_rows.append([t, x, y, w, j,
                                     resp[0, j, b].real, resp[0, j, b].imag])
    shapes_path = os.path.join(out_dir, "eval_shapes.txt")
    write_table(shapes_path, ["t", "x", "y"] + [f"mode_{i}" for i in range(pdm.n_modes)],
                shape_rows)
    frf_path = os.path.join(out_dir, "eval_frf.txt")
    write_table(frf_path, ["t", "x", "y", "omega", "input", "re", "im"], frf_rows)
    return {"shapes": shapes_path, "frf": frf_path, "n_samples": len(rows)}
