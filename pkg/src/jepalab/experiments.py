"""Experiment runners behind the ``jepalab`` command line.

Each experiment kind expands its config into independent sweep points,
evaluates them (optionally in a process pool), then writes long-format CSVs,
a metadata document and SVG plots. Only the orchestrator touches the output
directory and results are merged in point order, so outputs do not depend on
the number of workers.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .closed_form import DomainError, critical_time_formula, critical_time_ratio_formula, exact_critical_time
from .config import ExperimentConfig
from .core import GaussianDataSpec
from .deep_linear import (TIME_RESCALING, Population, Sampled, init_gaussian, init_structured,
                          learning_order, train_with_fallback)
from .generative import (MaskingSpec, TemporalSpec, block_images, consecutive_pairs, diagonalizability_error,
                         empirical_covariances, masking_covariances, masking_theoretical_params,
                         simulate_temporal, temporal_theoretical_params)
from .ode import OdeProblem, empirical_critical_time, fixed_point, integrate

SCHEMAS = {
    "trajectory": ("time", "feature_index", "w_bar"),
    "critical_time": ("objective", "L", "epsilon", "lambda", "rho", "p", "t_star_measured", "t_star_formula"),
    "generative": ("run_seed", "feature", "lambda_hat", "rho_hat", "lambda_theory", "rho_theory", "diag_error",
                   "T_or_n"),
    "ratio": ("objective", "L", "epsilon", "lambda", "rho", "rho_prime", "p", "ratio_measured", "ratio_formula"),
    "learning_order": ("objective", "run_seed", "rank", "feature_index", "lambda", "rho", "crossing_time",
                       "learned", "lr_used"),
    "diagnostics": ("step", "time", "loss", "balancedness"),
    "heatmap": ("row", "col", "value"),
}

METADATA_FILE = "metadata.json"
# metadata keys that legitimately differ between identical runs
VOLATILE_METADATA = ("wall_time_seconds",)


@dataclass
class RunArtifacts:
    directory: Path
    csv_files: list[Path] = field(default_factory=list)
    svg_files: list[Path] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def metadata_path(self) -> Path:
        return self.directory / METADATA_FILE


# --------------------------------------------------------------------------
# CSV helpers

def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def csv_text(schema: str, rows: Iterable[Sequence]) -> tuple[str, int]:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(SCHEMAS[schema])
    n = 0
    for row in rows:
        w.writerow([format_value(v) for v in row])
        n += 1
    return buf.getvalue(), n


def read_csv(path: str | Path) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


def detect_schema(header: Sequence[str]) -> str | None:
    for name, cols in SCHEMAS.items():
        if tuple(header) == cols:
            return name
    return None


# --------------------------------------------------------------------------
# execution

def _map(fn: Callable, points: list, threads: int) -> list:
    if threads <= 1 or len(points) <= 1:
        return [fn(p) for p in points]
    with ProcessPoolExecutor(max_workers=min(threads, len(points))) as pool:
        return list(pool.map(fn, points))


class _Writer:
    """Serializes every file write of one run."""

    def __init__(self, directory: Path):
        self.dir = directory
        self.dir.mkdir(parents=True, exist_ok=True)
        self.records: dict[str, int] = {}
        self.csv_files: list[Path] = []
        self.svg_files: list[Path] = []

    def csv(self, name: str, schema: str, rows) -> Path:
        text, n = csv_text(schema, rows)
        path = self.dir / name
        path.write_text(text, encoding="utf-8", newline="")
        self.records[name] = n
        self.csv_files.append(path)
        return path

    def svg(self, name: str, text: str) -> Path:
        path = self.dir / name
        path.write_text(text, encoding="utf-8", newline="")
        self.svg_files.append(path)
        return path


# --------------------------------------------------------------------------
# ode_sweep

def _ode_point(args):
    objective, L, lam, rho, eps, grid = args
    traj = integrate(OdeProblem(objective, L, lam, rho, eps, t_end=float(grid[-1])), t_eval=grid)
    return traj.times, traj.values


def _log_grid(t_end: float, n: int) -> np.ndarray:
    return np.concatenate([[0.0], np.geomspace(t_end * 1e-4, t_end, n - 1)])


def _run_ode_sweep(cfg: ExperimentConfig, w: _Writer, threads: int) -> dict:
    p = cfg.parameters
    panels = [(obj, L) for obj in p.objectives for L in p.depths]
    grids = {}
    for obj, L in panels:
        if p.t_end == "auto":
            t_end = 3.0 * max(exact_critical_time(obj, p.epsilon, lam, rho, L) for lam, rho in p.features.pairs())
        else:
            t_end = float(p.t_end)
        grids[obj, L] = _log_grid(t_end, p.n_grid) if p.log_time else np.linspace(0.0, t_end, p.n_grid)
    points = [(obj, L, lam, rho, p.epsilon, grids[obj, L])
              for obj, L in panels for lam, rho in p.features.pairs()]
    results = iter(_map(_ode_point, points, threads))
    from .plotting import plot_csvs
    for obj, L in panels:
        paths = []
        for k, _ in enumerate(p.features.pairs()):
            times, values = next(results)
            paths.append(w.csv(f"traj_{obj}_L{L}_f{k}.csv", "trajectory",
                               ((t, k, v) for t, v in zip(times, values))))
        w.svg(f"traj_{obj}_L{L}.svg", plot_csvs(paths, {"log_x": p.log_time, "title": f"{obj.upper()} L={L}",
                                                          "x_label": "time (ODE units)", "y_label": "w_bar"}))
    return {"time_unit": "ode"}


# --------------------------------------------------------------------------
# critical_time_study / ratio_study

def _critical_point(args):
    objective, L, eps, lam, rho, p = args
    prob = OdeProblem(objective, L, lam, rho, eps)
    measured = empirical_critical_time(integrate(prob), p)
    formula = critical_time_formula(objective, eps, lam, rho, L).leading
    return measured, formula


def _critical_rows(points, results):
    for (obj, L, eps, lam, rho, p), (m, f) in zip(points, results):
        yield obj, L, eps, lam, rho, p, m, f


def _run_critical(cfg: ExperimentConfig, w: _Writer, threads: int) -> dict:
    p = cfg.parameters
    points = [(obj, L, eps, lam, rho, p.p) for obj in p.objectives for L in p.depths for eps in p.epsilons
              for lam in p.lambdas for rho in p.rhos]
    results = _map(_critical_point, points, threads)
    path = w.csv("critical_times.csv", "critical_time", _critical_rows(points, results))
    from .plotting import plot_csvs
    w.svg("critical_times.svg", plot_csvs([path], {"x": "epsilon", "y": "t_star_measured",
                                                   "group": ["objective", "L", "lambda", "rho"],
                                                   "log_x": True, "log_y": True, "title": "critical times"}))
    return {"time_unit": "ode"}


def _run_ratio(cfg: ExperimentConfig, w: _Writer, threads: int) -> dict:
    p = cfg.parameters
    combos = [(obj, L, eps) for obj in p.objectives for L in p.depths for eps in p.epsilons]
    points = []
    for obj, L, eps in combos:
        points.append((obj, L, eps, p.lam, p.rho, p.p))
        points.append((obj, L, eps, p.lam, p.rho_prime, p.p))
    results = _map(_critical_point, points, threads)
    w.csv("critical_times.csv", "critical_time", _critical_rows(points, results))
    rows = []
    for i, (obj, L, eps) in enumerate(combos):
        t1, t2 = results[2 * i][0], results[2 * i + 1][0]
        formula = critical_time_ratio_formula(eps, p.lam, p.rho, p.rho_prime, L, obj)
        rows.append((obj, L, eps, p.lam, p.rho, p.rho_prime, p.p, t1 / t2, formula))
    path = w.csv("ratios.csv", "ratio", rows)
    from .plotting import plot_csvs
    w.svg("ratios.svg", plot_csvs([path], {"x": "epsilon", "y": "ratio_measured", "group": ["objective", "L"],
                                           "log_x": True, "title": "critical-time ratios"}))
    return {"time_unit": "ode"}


# --------------------------------------------------------------------------
# net_train

def net_train_spec(p) -> GaussianDataSpec:
    """Diagonal Gaussian spec: background coordinates plus the distinguished features.

    Distinguished features use ``sigma^2 = lambda / rho`` and
    ``y_var = lambda * rho + residual_var``.
    """
    lam = np.zeros(p.d)
    s2 = np.full(p.d, p.background.sigma_sq)
    yv = np.full(p.d, p.background.y_var)
    f = p.features
    for i, l, r in zip(f.indices, f.lam, f.rho):
        lam[i] = l
        s2[i] = l / r
        yv[i] = l * r + f.residual_var
    return GaussianDataSpec.from_arrays(lam, s2, yv)


def _net_point(args):
    p, objective, seed = args
    init_ss, data_ss = np.random.SeedSequence(seed).spawn(2)
    init_seed = int(init_ss.generate_state(1)[0])
    data_seed = int(data_ss.generate_state(1)[0])
    spec = net_train_spec(p)
    if p.batch_size is None:
        data = Population.from_spec(spec)
    else:
        data = Sampled(spec, p.batch_size, data_seed)

    def make():
        if p.init.kind == "structured":
            return init_structured(p.d, p.L, p.init.eps, objective, init_seed)
        return init_gaussian(p.d, p.L, p.init.scale, init_seed, objective)

    trace, lr = train_with_fallback(make, data, p.lr, p.steps, p.record_every, p.max_lr_halvings)
    idx = list(p.features.indices)
    if p.order_reference == "theory":
        final = np.array([fixed_point(objective, r, p.L) for r in p.features.rho])
    else:
        final = None
    order = learning_order(trace, p.p, final=final, features=idx)
    return dict(steps=trace.steps, times=trace.step_times, proj=trace.projections[:, idx], loss=trace.loss,
                bal=trace.balancedness, lr=lr, order=order.order, crossing=order.crossing_times,
                learned=order.learned)


def _run_net_train(cfg: ExperimentConfig, w: _Writer, threads: int) -> dict:
    p = cfg.parameters
    points = [(p, obj, seed) for obj in p.objectives for seed in p.seeds]
    results = _map(_net_point, points, threads)
    f = p.features
    pos = {i: k for k, i in enumerate(f.indices)}
    order_rows, lrs = [], {}
    from .plotting import plot_csvs
    for (_, obj, seed), r in zip(points, results):
        lrs[f"{obj}_seed{seed}"] = r["lr"]
        rows = ((t, i, r["proj"][s, k]) for k, i in enumerate(f.indices) for s, t in enumerate(r["times"]))
        path = w.csv(f"projections_{obj}_seed{seed}.csv", "trajectory", rows)
        w.csv(f"diagnostics_{obj}_seed{seed}.csv", "diagnostics",
              zip(r["steps"], r["times"], r["loss"], r["bal"]))
        w.svg(f"projections_{obj}_seed{seed}.svg",
              plot_csvs([path], {"title": f"{obj.upper()} seed {seed}", "x_label": "time (step * lr)",
                                 "y_label": "||W e_i||"}))
        for rank, i in enumerate(r["order"]):
            k = pos[i]
            order_rows.append((obj, seed, rank, i, f.lam[k], f.rho[k], r["crossing"][k], bool(r["learned"][k]),
                               r["lr"]))
    w.csv("learning_order.csv", "learning_order", order_rows)
    return {"time_unit": "network", "lr_used": lrs,
            "orders": {f"{obj}_seed{seed}": r["order"] for (_, obj, seed), r in zip(points, results)}}


# --------------------------------------------------------------------------
# genmodel_temporal

def temporal_spec(p, T: int) -> TemporalSpec:
    return TemporalSpec(block_images(p.block_sizes, p.image_norms), p.autocorr, p.noise_std, T, p.burn_in)


def _temporal_point(args):
    p, seed, T, want_heatmap = args
    spec = temporal_spec(p, T)
    est = empirical_covariances(consecutive_pairs(simulate_temporal(spec, seed)))
    sig, lam = est.project(spec.image_matrix())
    out = dict(lam=lam, sig=sig, diag=diagonalizability_error(est))
    if want_heatmap:
        _, q = np.linalg.eigh(est.sxx)
        out["heat"] = np.abs(q.T @ est.sxy @ q)
    return out


def _run_temporal(cfg: ExperimentConfig, w: _Writer, threads: int) -> dict:
    p = cfg.parameters
    theory = temporal_theoretical_params(temporal_spec(p, max(p.lengths)))
    points = [(p, seed, T, p.heatmap and seed == p.seeds[0] and T == max(p.lengths))
              for T in p.lengths for seed in p.seeds]
    results = _map(_temporal_point, points, threads)
    rows = []
    heat = None
    for (_, seed, T, _), r in zip(points, results):
        for a, th in enumerate(theory):
            rows.append((seed, a, r["lam"][a], r["lam"][a] / r["sig"][a], th.lambda_, th.rho, r["diag"], T))
        if "heat" in r:
            heat = r["heat"]
    path = w.csv("generative.csv", "generative", rows)
    from .plotting import plot_csvs
    w.svg("rho_vs_T.svg", plot_csvs([path], {"x": "T_or_n", "y": "rho_hat", "group": ["feature"], "log_x": True,
                                             "title": "rho estimates"}))
    w.svg("diag_error_vs_T.svg", plot_csvs([path], {"x": "T_or_n", "y": "diag_error", "group": ["run_seed"],
                                                    "log_x": True, "log_y": True, "title": "diagonalizability"}))
    if heat is not None:
        hp = w.csv("heatmap_qsxyq.csv", "heatmap",
                   ((i, j, heat[i, j]) for i in range(heat.shape[0]) for j in range(heat.shape[1])))
        w.svg("heatmap_qsxyq.svg", plot_csvs([hp], {"title": "|Q^T Sxy Q|"}))
    return {"burn_in": temporal_spec(p, 2).burn_in}


# --------------------------------------------------------------------------
# genmodel_masking

def masking_spec(p) -> MaskingSpec:
    cv = np.full(p.d, p.coefficients.rest)
    cv[:len(p.coefficients.values)] = p.coefficients.values
    return MaskingSpec(p.d, p.f, cv, p.noise_var, p.basis_seed, p.basis)


def _masking_point(args):
    p, seed, idx = args
    spec = masking_spec(p)
    est = masking_covariances(spec, p.n, seed, p.chunk)
    sig, lam = est.project(spec.basis_matrix()[:, idx])
    return dict(sig=sig, lam=lam, diag=diagonalizability_error(est))


def _run_masking(cfg: ExperimentConfig, w: _Writer, threads: int) -> dict:
    p = cfg.parameters
    spec = masking_spec(p)
    theory = masking_theoretical_params(spec)
    mean = spec.mean_coeff_var
    positive = [i for i, t in enumerate(theory) if t.lambda_ > 0]
    idx = [i for i in positive if spec.coeff_vars[i] >= p.min_excess * mean]
    points = [(p, seed, idx) for seed in p.seeds]
    results = _map(_masking_point, points, threads)
    rows = []
    for seed, r in zip(p.seeds, results):
        for k, i in enumerate(idx):
            th = theory[i]
            rows.append((seed, i, r["lam"][k], r["lam"][k] / r["sig"][k], th.lambda_, th.rho, r["diag"], p.n))
    w.csv("generative.csv", "generative", rows)
    return {"factors_reported": len(idx), "excluded_nonpositive_lambda": p.d - len(positive),
            "excluded_below_threshold": len(positive) - len(idx), "mean_coeff_var": mean}


RUNNERS = {
    "ode_sweep": _run_ode_sweep,
    "critical_time_study": _run_critical,
    "ratio_study": _run_ratio,
    "net_train": _run_net_train,
    "genmodel_temporal": _run_temporal,
    "genmodel_masking": _run_masking,
}


class ExperimentFailure(RuntimeError):
    """A numeric failure inside an experiment; ``__cause__`` holds the original error."""

    def __init__(self, name: str, kind: str, cause: BaseException):
        self.name, self.kind, self.cause = name, kind, cause
        super().__init__(f"experiment {name!r} ({kind}): {type(cause).__name__}: {cause}")


def run(cfg: ExperimentConfig, output_dir: str | Path | None = None, threads: int | None = None) -> RunArtifacts:
    """Execute ``cfg`` and write its artifacts.

    ``output_dir`` takes precedence over ``cfg.output_dir``; the default is
    ``runs/<name>``. ``threads`` defaults to the available CPU count.
    """
    out = Path(output_dir or cfg.output_dir or Path("runs") / cfg.name)
    threads = threads or os.cpu_count() or 1
    w = _Writer(out)
    start = time.perf_counter()
    try:
        extra = RUNNERS[cfg.kind](cfg, w, threads)
    except (ArithmeticError, DomainError, RuntimeError) as exc:
        raise ExperimentFailure(cfg.name, cfg.kind, exc) from exc
    meta = {
        "name": cfg.name,
        "kind": cfg.kind,
        "config": cfg.raw,
        "library_version": __version__,
        "time_rescaling": {"constant": TIME_RESCALING,
                           "meaning": "reduced-ODE time = L * network time (step * lr)"},
        "records": dict(sorted(w.records.items())),
        "extra": extra,
        "wall_time_seconds": time.perf_counter() - start,
    }
    (out / METADATA_FILE).write_text(json.dumps(_jsonable(meta), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return RunArtifacts(out, w.csv_files, w.svg_files, meta)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj
