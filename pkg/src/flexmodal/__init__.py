"""Position-dependent modal identification of flexible motion systems.

Submodules are loaded lazily so the console script can pin BLAS threading
before numpy is imported.
"""

from importlib import import_module

_EXPORTS = {
    "ModalModel": "modal",
    "PositionDependentModel": "modal",
    "ScheduleMap": "modal",
    "frf_eval": "modal",
    "eval_at_position": "modal",
    "apply_schedule": "modal",
    "ModelDocument": "modelio",
    "read_model_file": "modelio",
    "write_model_file": "modelio",
    "PlateSpec": "synth",
    "ExperimentRecord": "synth",
    "StabilizingFeedback": "synth",
    "make_plate_model": "synth",
    "simulate_response": "synth",
    "design_rigid_pd": "synth",
    "MultisineSpec": "frf",
    "FrfDataset": "frf",
    "design_multisine": "frf",
    "etfe_robust": "frf",
    "closed_to_open": "frf",
    "compensate_delay": "frf",
    "estimate_delay": "frf",
    "LmfdStructure": "lmfd",
    "LmfdModel": "lmfd",
    "OrthoBasis": "lmfd",
    "build_structure": "lmfd",
    "build_orthonormal_basis": "lmfd",
    "eval_lmfd": "lmfd",
    "WeightingSpec": "solver",
    "SolveReport": "solver",
    "weighting_inv_truncated": "solver",
    "cost": "solver",
    "sk_solve": "solver",
    "lm_refine": "solver",
    "extend_outputs": "solver",
    "LmfdParametrization": "solver",
    "ModalParametrization": "solver",
    "poles_of": "extract",
    "pair_poles": "extract",
    "fit_residues": "extract",
    "prune_computational_modes": "extract",
    "rank1_factor": "extract",
    "lmfd_to_modal": "extract",
    "TpsSurface": "tps",
    "fit_tps": "tps",
    "eval_tps": "tps",
    "loocv_select": "tps",
    "interpolate_mode_shapes": "tps",
    "PipelineConfig": "config",
    "read_config": "config",
    "write_config": "config",
    "FlexmodalError": "errors",
    "ValidationError": "errors",
    "NumericalError": "errors",
    "ConvergenceWarning": "errors",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        module = import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return __all__
