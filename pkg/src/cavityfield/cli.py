"""Command-line front end.

Verbs: generate (truth and data files), reconstruct (one noise level),
sweep (the full noise schedule with continuation), gradcheck (derivative
verification), metrics (recompute metrics from a run directory).
Configuration comes from an optional key=value file plus repeatable
--set overrides; every config key is addressable from the command line.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import fieldio
from .experiment import (StageError, ExperimentConfig, prepare_experiment,
                         run_reconstruction, epsilon_sweep, run_gradient_check,
                         recompute_metrics)

FD_TOL = 1e-3
DUALITY_TOL = 1e-10


def _load_config(args) -> ExperimentConfig:
    settings = {}
    if args.config:
        with open(args.config) as fh:
            settings.update(fieldio.parse_config_text(fh.read()))
    for item in args.set or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        settings[key.strip()] = val.strip()
    if getattr(args, "outdir", None):
        settings["experiment.outdir"] = args.outdir
    return ExperimentConfig.from_settings(settings)


def _cmd_generate(args) -> int:
    config = _load_config(args)
    bundle = prepare_experiment(config)
    outdir = config.outdir or "generated"
    os.makedirs(outdir, exist_ok=True)
    settings = config.to_settings()
    settings["experiment.outdir"] = outdir
    with open(os.path.join(outdir, "config.txt"), "w") as fh:
        fh.write(fieldio.config_to_text(settings))
    grid = bundle.grid
    fieldio.cauchy_to_csv(os.path.join(outdir, "data_exact.csv"), grid, bundle.base)
    for k, data in enumerate(bundle.noisy):
        fieldio.cauchy_to_csv(os.path.join(outdir, f"data_eps{k}.csv"), grid, data)
    fieldio.dump_field(os.path.join(outdir, "truth_potential.txt"), grid, bundle.u0)
    fieldio.dump_pgm(os.path.join(outdir, "truth_mask.pgm"), grid,
                     grid.node_average_of_cells(bundle.retained.astype(float)))
    fieldio.write_manifest(os.path.join(outdir, "manifest.txt"), outdir)
    print(f"wrote {2 + len(bundle.noisy)} data files to {outdir}")
    return 0


def _cmd_reconstruct(args) -> int:
    config = _load_config(args)
    res = run_reconstruction(config, epsilon=args.epsilon)
    for key, val in sorted(res.metrics().items()):
        print(f"{key} {val}")
    return 0


def _cmd_sweep(args) -> int:
    config = _load_config(args)
    sweep = epsilon_sweep(config)
    cols = ("epsilon", "eta", "hausdorff", "symdiff_area", "final_misfit",
            "state_error", "error")
    print(",".join(cols))
    for row in sweep.rows:
        print(",".join(str(row[c]) for c in cols))
    failures = sum(1 for row in sweep.rows if row["error"])
    if failures:
        print(f"error [sweep] {failures} of {len(sweep.rows)} runs failed",
              file=sys.stderr)
        return 1
    return 0


def _cmd_gradcheck(args) -> int:
    config = _load_config(args)
    report = run_gradient_check(config, directions=args.directions,
                                step=args.step)
    ok = True
    for key in sorted(report):
        tol = FD_TOL if key.startswith("fd_") else DUALITY_TOL
        status = "ok" if report[key] <= tol else "FAIL"
        ok = ok and report[key] <= tol
        print(f"{key} {report[key]:.3e} (tol {tol:.0e}) {status}")
    if not ok:
        print("error [gradcheck] derivative mismatch above tolerance",
              file=sys.stderr)
        return 1
    return 0


def _cmd_metrics(args) -> int:
    metrics = recompute_metrics(args.run)
    for key, val in sorted(metrics.items()):
        print(f"{key} {val}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cavityfield",
        description="Phase-field reconstruction of insulating cavities "
                    "from one boundary current/voltage pair.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", "-c", help="key=value config file")
        p.add_argument("--set", "-s", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--outdir", "-o", help="output directory override")

    p = sub.add_parser("generate", help="solve the direct problem, write data files")
    common(p)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("reconstruct", help="minimize at one noise level")
    common(p)
    p.add_argument("--epsilon", type=float, default=None,
                   help="noise level (default: first configured)")
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("sweep", help="run the full decreasing noise schedule")
    common(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("gradcheck", help="verify derivatives against finite differences")
    common(p)
    p.add_argument("--directions", type=int, default=3)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("metrics", help="recompute metrics from a run directory")
    p.add_argument("--run", required=True, help="run directory to re-measure")
    p.set_defaults(func=_cmd_metrics)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error [config] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
