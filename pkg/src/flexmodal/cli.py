"""Command-line interface.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 a solver
finished with a convergence warning (soft failure; outputs are still
written unless --strict aborted the run at the warning).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import warnings

from .config import PipelineConfig, read_config
from .errors import ConvergenceWarning, NumericalError, ValidationError
from . import pipeline

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_SOFT = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flexmodal",
        description="Position-dependent modal identification pipeline",
    )
    parser.add_argument("--config", help="pipeline config file (key: value text)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--strict", action="store_true",
                        help="abort on convergence warnings instead of finishing")
    parser.add_argument("--stage", help="identify only: resume at this stage "
                                        f"({', '.join(pipeline.IDENTIFY_STAGES)})")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="generate the synthetic bench dataset")
    p_est = sub.add_parser("estimate", help="records to open-loop FRF")
    p_est.add_argument("records_dir")
    p_id = sub.add_parser("identify", help="FRF file to modal model")
    p_id.add_argument("frf_file")
    p_in = sub.add_parser("interp", help="interpolate sampled mode shapes")
    p_in.add_argument("model_file")
    p_ev = sub.add_parser("eval", help="evaluate the model along a trajectory")
    p_ev.add_argument("model_file")
    p_ev.add_argument("trajectory_file")
    return parser


def _load_config(args) -> PipelineConfig:
    config = read_config(args.config) if args.config else PipelineConfig().validate()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def run_command(args) -> int:
    config = _load_config(args)
    soft = False
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if args.strict:
            warnings.simplefilter("error", ConvergenceWarning)
        if args.command == "synth":
            result = pipeline.cmd_synth(config, args.out)
            print(f"wrote {result['model']} and {len(result['records'])} records")
        elif args.command == "estimate":
            result = pipeline.cmd_estimate(config, args.records_dir, args.out)
            print(f"wrote {result['frf_open']} (delay {result['tau']:.3e} s)")
        elif args.command == "identify":
            result = pipeline.cmd_identify(config, args.frf_file, args.out,
                                           stage=args.stage)
            print(f"wrote {result['model']}")
            for key, value in result["trace_check"].items():
                print(f"  trace: {key} = {value}")
        elif args.command == "interp":
            result = pipeline.cmd_interp(config, args.model_file, args.out)
            print(f"wrote {result['model']} and {len(result['grids'])} shape grids")
        elif args.command == "eval":
            result = pipeline.cmd_eval(config, args.model_file, args.trajectory_file,
                                       args.out)
            print(f"wrote {result['shapes']} ({result['n_samples']} samples)")
        else:  # pragma: no cover - argparse guards this
            raise ValidationError(f"unknown command {args.command}")
        for w in caught:
            if issubclass(w.category, ConvergenceWarning):
                soft = True
            print(f"warning: {w.message}", file=sys.stderr)
    return EXIT_SOFT if soft else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run_command(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ConvergenceWarning as exc:
        print(f"aborted on convergence warning (--strict): {exc}", file=sys.stderr)
        return EXIT_SOFT


if __name__ == "__main__":
    sys.exit(main())
