#!/usr/bin/env python3
"""Run every bundled experiment and write theory-vs-simulation reports.

    python scripts/reproduce_all.py [--out runs] [--skip fig1_dist1 fig1_dist2] [--threads N]
"""
import argparse
import sys
from pathlib import Path

from jepalab.config import bundled_configs, load_config
from jepalab.experiments import run
from jepalab.report import REPORT_KINDS, report_theory_vs_sim


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--threads", type=int)
    ap.add_argument("--skip", nargs="*", default=[])
    args = ap.parse_args(argv)
    out = Path(args.out)
    by_kind = {}
    for name, path in bundled_configs().items():
        if name in args.skip:
            continue
        cfg = load_config(path)
        art = run(cfg, out / name, args.threads)
        print(f"{name}: {art.metadata['wall_time_seconds']:.1f}s -> {art.directory}")
        by_kind.setdefault(cfg.kind, []).append(art.directory)
    for kind, dirs in sorted(by_kind.items()):
        if kind not in REPORT_KINDS:
            continue
        rep = report_theory_vs_sim(dirs, kind)
        (out / f"report_{kind}.md").write_text(rep.to_markdown(), encoding="utf-8")
        print(f"report {kind}: {rep.n_flagged} of {len(rep.rows)} rows flagged")
    return 0


if __name__ == "__main__":
    sys.exit(main())
