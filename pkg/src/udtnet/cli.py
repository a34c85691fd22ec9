"""Command-line entry point: ``udtnet <subcommand> [--config F] [--seed N] [--out DIR] [--threads N]``.

Exit codes: 0 success, 2 invalid configuration or input, 3 runtime failure.
Every subcommand that writes holds a lockfile in the output directory.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline, qoe
from .config import ExperimentConfig, load_config
from .delivery_sim import SampleTable
from .errors import UdtError, ValidationError
from .manage import fig4b_rows_to_csv
from .udt_store import TwoTierStore

log = logging.getLogger("udtnet")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


def _config(args) -> ExperimentConfig:
    overrides = {"master_seed": args.seed, "output_dir": args.out, "threads": args.threads}
    if args.config:
        return load_config(args.config, **overrides)
    return ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})


def _samples(args, cfg: ExperimentConfig) -> SampleTable:
    path = Path(args.samples) if args.samples else Path(cfg.output_dir) / "samples.csv"
    if not path.exists():
        raise ValidationError(f"sample table {path} not found (run 'simulate' first or pass --samples)")
    return SampleTable.from_csv(path.read_text(encoding="utf-8"))


def _fit(args, cfg):
    store = pipeline.ingest_samples(_samples(args, cfg))
    fit = pipeline.fit_models(store)
    if fit.agnostic is None:
        raise ValidationError("; ".join(fit.warnings))
    return store, fit


def cmd_synth_traces(args, cfg):
    tables = {f"traces/{t.user_id}.csv": t.to_csv() for t in pipeline.build_traces(cfg)}
    return pipeline.emit_report(tables, cfg.output_dir, merge=True)


def cmd_simulate(args, cfg):
    return pipeline.emit_report({"samples.csv": pipeline.simulate(cfg).to_csv()}, cfg.output_dir, merge=True)


def cmd_fit(args, cfg):
    _, fit = _fit(args, cfg)
    models = [fit.agnostic] + [fit.per_user[u] for u in fit.slices if u in fit.per_user]
    return pipeline.emit_report({"models.csv": qoe.models_to_csv(models),
                                 "fig4a_curves.csv": pipeline.fig4a_csv(fit)}, cfg.output_dir, merge=True)


def cmd_select(args, cfg):
    _, fit = _fit(args, cfg)
    ks = cfg.selection_k if cfg.selection_k is not None else range(len(fit.per_user) + 1)
    rows = pipeline.selection_curve(fit, cfg.strategies, ks, cfg.selection_seeds, cfg.master_seed)
    return pipeline.emit_report({"fig4b_curve.csv": fig4b_rows_to_csv(rows)}, cfg.output_dir, merge=True)


def cmd_allocate(args, cfg):
    if cfg.allocation_grid is None:
        raise ValidationError("allocation.grid and allocation.budget must be configured")
    store, fit = _fit(args, cfg)
    return pipeline.emit_report({"allocation.csv": pipeline.allocate(cfg, store, fit).to_csv()},
                                cfg.output_dir, merge=True)


def cmd_run(args, cfg):
    return pipeline.run_experiment(cfg)


def cmd_report(args, cfg):
    status = pipeline.verify_manifest(cfg.output_dir)
    for name, ok in status.items():
        print(f"{'ok  ' if ok else 'BAD '} {name}")
    if not all(status.values()):
        raise UdtError("manifest digests do not match the files on disk")
    return None


COMMANDS = {
    "synth-traces": cmd_synth_traces,
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "select": cmd_select,
    "allocate": cmd_allocate,
    "run": cmd_run,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="udtnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key = value experiment configuration")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--threads", type=int, help="sweep worker threads")
        if name in ("fit", "select", "allocate"):
            sp.add_argument("--samples", help="samples.csv to read (default: <out>/samples.csv)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command in ("run", "report"):
            report = COMMANDS[args.command](args, cfg)
        else:
            with pipeline.output_lock(cfg.output_dir):
                report = COMMANDS[args.command](args, cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except pipeline.StageError as exc:
        code = EXIT_VALIDATION if isinstance(exc.__cause__, ValidationError) else EXIT_RUNTIME
        print(f"error: {exc}", file=sys.stderr)
        return code
    except (UdtError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if report is not None:
        for name, digest in report.files.items():
            print(f"{digest}  {name}")
        for stage, secs in report.stage_seconds.items():
            log.info("stage %s took %.2f s", stage, secs)
        for w in report.warnings:
            print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
