#!/usr/bin/env python3
"""Compare MAE trajectories of growing depth with the depth-one JEPA trajectory.

Prints the sup-norm gap on a common time grid and, separately, the gap after
rescaling each trajectory's time by its own critical time.
"""
import numpy as np

from jepalab.ode import OdeProblem, empirical_critical_time, integrate


def main(eps=1e-3, depths=(2, 10, 50, 200, 1000, 5000)):
    ref = integrate(OdeProblem("jepa", 1, 1.0, 1.0, eps))
    t_ref = empirical_critical_time(ref)
    grid = np.linspace(0.0, 4.0 * t_ref, 40001)
    s = np.linspace(0.0, 4.0, 4001)
    print(f"JEPA L=1 critical time {t_ref:.2f}")
    print("    L   t*_MAE   common-grid gap   rescaled gap")
    for L in depths:
        mae = integrate(OdeProblem("mae", L, 1.0, 1.0, eps))
        t_m = empirical_critical_time(mae)
        g = np.max(np.abs(mae.at(grid) - ref.at(grid)))
        h = np.max(np.abs(mae.at(s * t_m) - ref.at(s * t_ref)))
        print(f"{L:5d} {t_m:8.2f} {g:17.4f} {h:14.4f}")


if __name__ == "__main__":
    main()
