"""Command line front end.

    jepalab run CONFIG [CONFIG ...]
    jepalab report --kind KIND RUN_DIR [RUN_DIR ...]
    jepalab plot CSV [CSV ...] [--log-x] [--log-y] [--out FILE]
    jepalab list-experiments

Exit codes: 0 success, 1 numeric failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .closed_form import DomainError
from .config import ConfigError, bundled_configs, load_config, resolve_config
from .core import ValidationError
from .plotting import PlotFormatError, emit_plot
from .report import ReportError

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _global_flags(parser, suppress: bool):
    # flags are accepted before or after the subcommand; the subcommand copy
    # must not reset a value given before it
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--output-dir", help="output directory (run: run root; report/plot: file location)",
                        **kw)
    parser.add_argument("--threads", type=int, help="worker processes for sweep points (default: CPU count)",
                        **kw)
    parser.add_argument("--seed-override", type=int,
                        help="replace each seed list by SEED, SEED+1, ... of the same length", **kw)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    parser = _Parser(prog="jepalab", description="Experiments on JEPA and MAE deep linear dynamics.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_run = sub.add_parser("run", parents=[common], help="run experiment configs (paths or bundled names)")
    p_run.add_argument("configs", nargs="+")

    p_rep = sub.add_parser("report", parents=[common], help="tabulate theory vs simulation for finished runs")
    p_rep.add_argument("--kind", required=True)
    p_rep.add_argument("run_dirs", nargs="*")

    p_plot = sub.add_parser("plot", parents=[common], help="render CSVs sharing one schema to SVG")
    p_plot.add_argument("csvs", nargs="+")
    p_plot.add_argument("--log-x", action="store_true")
    p_plot.add_argument("--log-y", action="store_true")
    p_plot.add_argument("--x")
    p_plot.add_argument("--y")
    p_plot.add_argument("--group", nargs="*")
    p_plot.add_argument("--title")
    p_plot.add_argument("--out")

    sub.add_parser("list-experiments", parents=[common], help="list bundled experiment configs")
    return parser


def _cmd_run(args) -> int:
    from .experiments import run
    cfgs = [load_config(resolve_config(c)) for c in args.configs]
    if args.seed_override is not None:
        cfgs = [c.with_seed_override(args.seed_override) for c in cfgs]
    for cfg in cfgs:
        out = None
        if args.output_dir:
            out = Path(args.output_dir) / cfg.name if len(cfgs) > 1 else Path(args.output_dir)
        art = run(cfg, out, args.threads)
        n = sum(art.metadata["records"].values())
        print(f"{cfg.name}: {len(art.csv_files)} csv ({n} rows), {len(art.svg_files)} svg -> {art.directory}")
    return EXIT_OK


def _cmd_report(args) -> int:
    from .report import report_theory_vs_sim
    rep = report_theory_vs_sim(args.run_dirs, args.kind)
    text = rep.to_markdown()
    if args.output_dir:
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"report_{args.kind}.md").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def _cmd_plot(args) -> int:
    style = {"log_x": args.log_x, "log_y": args.log_y}
    for key in ("x", "y", "title"):
        if getattr(args, key) is not None:
            style[key] = getattr(args, key)
    if args.group is not None:
        style["group"] = args.group
    out = args.out
    if out is None and args.output_dir:
        out = Path(args.output_dir) / (Path(args.csvs[0]).stem + ".svg")
    print(emit_plot(args.csvs, style, out))
    return EXIT_OK


def _cmd_list(_args) -> int:
    for name, path in bundled_configs().items():
        cfg = load_config(path)
        print(f"{name:28s} {cfg.kind}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads is not None and args.threads < 1:
        print("jepalab: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    handler = {"run": _cmd_run, "report": _cmd_report, "plot": _cmd_plot,
               "list-experiments": _cmd_list}[args.command]
    try:
        return handler(args)
    except (ConfigError, PlotFormatError, ReportError, FileNotFoundError, ValidationError) as exc:
        print(f"jepalab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, DomainError, RuntimeError) as exc:
        print(f"jepalab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
