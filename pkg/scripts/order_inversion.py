#!/usr/bin/env python3
"""Train both objectives on the two five-feature distributions and print the learning orders.

Distribution 1 ranks features the same way by lambda and rho; distribution 2
reverses rho. JEPA follows rho, MAE follows lambda, so only JEPA flips.
Takes about four minutes on one core.
"""
import sys
import tempfile
from pathlib import Path

from jepalab.config import bundled_configs, load_config
from jepalab.experiments import read_csv, run


def orders(directory: Path) -> dict:
    _, rows = read_csv(directory / "learning_order.csv")
    return {o: [int(r["feature_index"]) for r in rows if r["objective"] == o] for o in ("jepa", "mae")}


def main():
    with tempfile.TemporaryDirectory() as tmp:
        for name in ("fig1_dist1", "fig1_dist2"):
            art = run(load_config(bundled_configs()[name]), Path(tmp) / name)
            o = orders(art.directory)
            print(f"{name}: JEPA {o['jepa']}  MAE {o['mae']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
