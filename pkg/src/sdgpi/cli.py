"""Command-line interface: run, validate, oracle, report."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, GameError, NoValidLambda
from .experiments import emit_outputs, run_experiment, summary_lines
from .model import probe_points, resolve_lambda
from .scenarios import build_spec, parse_config

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NO_LAMBDA = 2
EXIT_CONFIG = 3
EXIT_IO = 4


def _add_common(parser: argparse.ArgumentParser, with_out: bool = True) -> None:
    parser.add_argument("--config", required=True, help="scenario configuration file")
    if with_out:
        parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override master seed")
    parser.add_argument("--mode", choices=("desk", "full"), default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--repro", choices=("on", "off"), default=None)


def _load_config(args: argparse.Namespace):
    cfg = parse_config(Path(args.config).read_text(encoding="utf-8"))
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.repro is not None:
        overrides["repro"] = args.repro == "on"
    return replace(cfg, **overrides) if overrides else cfg


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    report = run_experiment(cfg)
    paths = emit_outputs(report, args.out)
    print(f"wrote {paths['summary']}")
    for name, passed in report.verdicts.items():
        print(f"verdict.{name} = {'PASS' if passed else 'FAIL'}")
    return EXIT_OK


def _cmd_validate(args: argparse.Namespace) -> int:
    cfg = _load_config(args).resolved()
    spec = build_spec(cfg)
    cert = resolve_lambda(spec, probe_points(spec, 100, seed=cfg.master_seed))
    print(f"config ok: scenario={cfg.scenario} experiment={cfg.experiment} mode={cfg.mode}")
    print(f"lambda = {cert.lam:.12g} (residual {cert.residual:.3e} over "
          f"{cert.probe_count} probes)")
    print(f"h = {cfg.h:g}, rollouts = {cfg.rollouts}, "
          f"decision_interval = {cfg.decision_interval:g}, trials = {cfg.trials}")
    return EXIT_OK


def _cmd_oracle(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    cfg = replace(cfg, experiment="oracle_xcheck")
    report = run_experiment(cfg)
    paths = emit_outputs(report, args.out)
    if args.xi_csv:
        from .oracle import Grid2D, export_xi_csv, solve_dirichlet
        from .scenarios import build_pe_spec

        resolved = cfg.resolved()
        spec = build_pe_spec(resolved)
        half = resolved.oracle_box_half
        grid = Grid2D((-half, -half), (half, half),
                      (resolved.oracle_nodes, resolved.oracle_nodes),
                      n_time_steps=resolved.oracle_time_steps,
                      store_every=resolved.oracle_store_every)
        sol = solve_dirichlet(spec, grid, report.lam)
        csv_path = Path(args.out) / "xi_field.csv"
        export_xi_csv(sol, str(csv_path))
        print(f"wrote {csv_path}")
    print(f"wrote {paths['summary']}")
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    summary = Path(args.out) / "summary.txt"
    if not summary.exists():
        raise FileNotFoundError(f"no summary at {summary}")
    sys.stdout.write(summary.read_text(encoding="utf-8"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdgpi",
        description="Risk-minimizing zero-sum stochastic differential games "
                    "via path-integral Monte Carlo",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run the configured experiment")
    _add_common(run_p)
    run_p.set_defaults(func=_cmd_run)
    val_p = sub.add_parser("validate", help="check a config and resolve lambda")
    _add_common(val_p, with_out=False)
    val_p.set_defaults(func=_cmd_validate)
    orc_p = sub.add_parser("oracle", help="run the grid-oracle cross-check")
    _add_common(orc_p)
    orc_p.add_argument("--xi-csv", action="store_true",
                       help="also export the xi field as CSV")
    orc_p.set_defaults(func=_cmd_oracle)
    rep_p = sub.add_parser("report", help="print the summary of a finished run")
    rep_p.add_argument("--out", required=True, help="directory of a previous run")
    rep_p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NoValidLambda as exc:
        print(f"error (no valid lambda): {exc}", file=sys.stderr)
        return EXIT_NO_LAMBDA
    except ConfigError as exc:
        print(f"error (configuration): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FileNotFoundError) as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return EXIT_IO
    except GameError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
