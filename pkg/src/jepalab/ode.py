"""Reduced per-feature gradient-flow dynamics.

For one decoupled feature the encoder projection ``w`` obeys

    JEPA:  dw/dt = lam * (w**(3 - 1/L) - w**3 / rho)
    MAE:   dw/dt = lam * (w**(2 - 1/L) - w**3 / rho)

The network trained by gradient flow follows these equations in the time
variable ``L * t_net`` (see :data:`jepalab.deep_linear.TIME_RESCALING`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.integrate import RK45

from .closed_form import DomainError, critical_time_formula
from .core import GaussianDataSpec, Objective, ValidationError

DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-13
# convergence threshold on |rhs| / (1 + fixed point); independent of the solver's atol,
# which must stay tiny to resolve the plateau at w ~ eps
DEFAULT_STOP_TOL = 1e-9
# dense-output samples inserted inside every accepted step
DENSE_PER_STEP = 4
_MAX_STEPS = 2_000_000


class StiffnessError(ArithmeticError):
    pass


class DivergenceError(ArithmeticError):
    pass


class NotConvergedError(RuntimeError):
    pass


def jepa_rhs(w: float, lam: float, rho: float, L: int) -> float:
    if w < 0:
        raise DomainError(f"w must be non-negative, got {w}")
    return lam * (w ** (3.0 - 1.0 / L) - w ** 3 / rho)


def mae_rhs(w: float, lam: float, rho: float, L: int) -> float:
    if w < 0:
        raise DomainError(f"w must be non-negative, got {w}")
    return lam * (w ** (2.0 - 1.0 / L) - w ** 3 / rho)


def rhs(objective, w, lam, rho, L):
    if Objective.parse(objective) is Objective.JEPA:
        return jepa_rhs(w, lam, rho, L)
    return mae_rhs(w, lam, rho, L)


def fixed_point(objective, rho: float, L: int) -> float:
    """rho**L for JEPA, rho**(L/(L+1)) for MAE."""
    if not rho > 0 or L < 1:
        raise ValidationError(f"need rho > 0 and L >= 1, got rho={rho}, L={L}")
    if Objective.parse(objective) is Objective.JEPA:
        return rho ** L
    return rho ** (L / (L + 1))


def relaxation_rate(objective, lam: float, rho: float, L: int) -> float:
    """Magnitude of d(rhs)/dw at the fixed point."""
    fp = fixed_point(objective, rho, L)
    if Objective.parse(objective) is Objective.JEPA:
        return lam * fp ** 2 / (L * rho)
    return lam * (1.0 + 1.0 / L) * fp ** (1.0 - 1.0 / L)


@dataclass(frozen=True)
class OdeProblem:
    objective: Objective
    L: int
    lam: float
    rho: float
    eps: float
    t_end: float | str = "auto"

    def __post_init__(self):
        object.__setattr__(self, "objective", Objective.parse(self.objective))
        if int(self.L) != self.L or self.L < 1:
            raise ValidationError(f"L must be an integer >= 1, got {self.L}")
        object.__setattr__(self, "L", int(self.L))
        if not self.lam > 0:
            raise ValidationError(f"lambda must be positive, got {self.lam}")
        if not self.rho > 0:
            raise ValidationError(f"rho must be positive, got {self.rho}")
        fp = self.fixed_point
        if not 0 < self.eps < fp:
            raise ValidationError(
                f"eps={self.eps} must lie in (0, fixed point {fp:g}); decaying trajectories are not supported")
        if self.t_end != "auto" and not (isinstance(self.t_end, (int, float)) and self.t_end >= 0):
            raise ValidationError(f"t_end must be 'auto' or a non-negative number, got {self.t_end!r}")

    @property
    def fixed_point(self) -> float:
        return fixed_point(self.objective, self.rho, self.L)

    def rhs(self, w: float) -> float:
        return rhs(self.objective, w, self.lam, self.rho, self.L)

    def horizon(self) -> float:
        """Integration horizon used when ``t_end == 'auto'``."""
        if self.t_end != "auto":
            return float(self.t_end)
        eps = min(self.eps, 0.999)
        t_est = critical_time_formula(self.objective, eps, self.lam, self.rho, self.L).leading
        rate = relaxation_rate(self.objective, self.lam, self.rho, self.L)
        return 50.0 * t_est + 40.0 / rate


@dataclass(frozen=True)
class OdeTrajectory:
    times: np.ndarray
    values: np.ndarray
    converged: bool
    fixed_point: float

    def __post_init__(self):
        for name in ("times", "values"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def final(self) -> float:
        return float(self.values[-1])

    def at(self, t) -> np.ndarray:
        """Linear interpolation of the stored samples; held constant past the end."""
        return np.interp(t, self.times, self.values)


def integrate(problem: OdeProblem, rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
              t_eval: Sequence[float] | None = None, stop_tol: float = DEFAULT_STOP_TOL) -> OdeTrajectory:
    """Integrate one reduced ODE with an adaptive Dormand-Prince 4(5) scheme.

    The run stops at the horizon or as soon as the trajectory is past half its
    fixed point with ``|rhs| / rate < stop_tol * (1 + fixed_point)``, where ``rate`` is
    :func:`relaxation_rate`; this bounds the distance to the fixed point. Samples are the
    accepted step ends plus :data:`DENSE_PER_STEP` dense-output points inside
    each step, or the requested ``t_eval`` points.
    """
    p = problem
    fp = p.fixed_point
    t_end = p.horizon()
    # |rhs| / rate estimates the distance to the fixed point, so the stop test
    # bounds |w - fp| for slow and stiff (fast-relaxing) fixed points alike
    rate = relaxation_rate(p.objective, p.lam, p.rho, p.L)
    stop_level = stop_tol * (1.0 + fp) * rate
    if t_end == 0:
        return OdeTrajectory(np.array([0.0]), np.array([p.eps]), False, fp)

    lam, rho, L = p.lam, p.rho, p.L
    expo = (3.0 if p.objective is Objective.JEPA else 2.0) - 1.0 / L
    inv_rho = 1.0 / rho

    def f(_t, y):
        w = y[0] if y[0] > 0.0 else 0.0
        return np.array([lam * (w ** expo - w * w * w * inv_rho)])

    grid = None
    if t_eval is not None:
        grid = np.asarray(t_eval, dtype=float)
        if grid.ndim != 1 or grid.size == 0 or grid[0] < 0 or np.any(np.diff(grid) <= 0):
            raise ValidationError("t_eval must be a non-empty, non-negative, strictly increasing grid")
        t_end = max(t_end, float(grid[-1])) if problem.t_end == "auto" else t_end
    solver = RK45(f, 0.0, np.array([p.eps]), t_end, rtol=rtol, atol=atol)
    ts = [0.0]
    ws = [p.eps]
    gi = 0
    if grid is not None:
        ts, ws = [], []
        while gi < grid.size and grid[gi] == 0.0:
            ts.append(0.0)
            ws.append(p.eps)
            gi += 1
    converged = False
    frac = np.arange(1, DENSE_PER_STEP + 1) / (DENSE_PER_STEP + 1)
    n = 0
    while solver.status == "running":
        t_prev = solver.t
        msg = solver.step()
        n += 1
        if solver.status == "failed":
            raise StiffnessError(f"integration failed at t={solver.t:g}: {msg}")
        w = solver.y[0]
        if not math.isfinite(w):
            raise DivergenceError(f"non-finite state at t={solver.t:g}")
        if grid is None:
            dense = solver.dense_output()
            inner = t_prev + frac * (solver.t - t_prev)
            ts.extend(inner.tolist())
            ws.extend(dense(inner)[0].tolist())
            ts.append(solver.t)
            ws.append(w)
        else:
            hi = int(np.searchsorted(grid, solver.t, side="right"))
            if hi > gi:
                ts.extend(grid[gi:hi].tolist())
                ws.extend(solver.dense_output()(grid[gi:hi])[0].tolist())
                gi = hi
        if w > 0.5 * fp and abs(p.rhs(max(w, 0.0))) < stop_level:
            converged = True
            break
        if n > _MAX_STEPS:
            raise StiffnessError(f"exceeded {_MAX_STEPS} steps at t={solver.t:g}")
    if grid is not None:
        # past the stopping time the state is held at its converged value
        ts.extend(grid[gi:].tolist())
        ws.extend([solver.y[0]] * (grid.size - gi))
    times = np.asarray(ts)
    values = np.asarray(ws)
    return OdeTrajectory(times, values, converged, fp)


def empirical_critical_time(traj: OdeTrajectory, p: float = 0.5, fixed_point: float | None = None) -> float:
    """First time the trajectory reaches ``p * fixed_point`` (linear interpolation)."""
    if not 0 < p < 1:
        raise ValidationError(f"p must lie in (0, 1), got {p}")
    fp = traj.fixed_point if fixed_point is None else fixed_point
    level = p * fp
    v = traj.values
    if v[0] >= level:
        return float(traj.times[0])
    idx = np.flatnonzero(v >= level)
    if idx.size == 0:
        raise NotConvergedError(f"trajectory never reaches {p} of its fixed point {fp:g}")
    k = idx[0]
    t0, t1 = traj.times[k - 1], traj.times[k]
    v0, v1 = v[k - 1], v[k]
    return float(t0 + (level - v0) * (t1 - t0) / (v1 - v0))


def feature_problems(spec: GaussianDataSpec, objective, L: int, eps: float,
                     t_end: float | str = "auto") -> list[OdeProblem]:
    """One problem per feature of ``spec``; rejects non-positive lambda."""
    return [OdeProblem(objective, L, f.lambda_, f.rho, eps, t_end) for f in spec.features]


def integrate_spec(spec: GaussianDataSpec, objective, L: int, eps: float,
                   t_eval: Sequence[float] | None = None, **kw) -> list[OdeTrajectory]:
    return [integrate(p, t_eval=t_eval, **kw) for p in feature_problems(spec, objective, L, eps)]
