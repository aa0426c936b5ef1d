"""Theory-versus-simulation tables built from finished run directories."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .experiments import METADATA_FILE, read_csv

REPORT_KINDS = ("critical_time_study", "ratio_study", "genmodel_temporal", "genmodel_masking", "ode_sweep")
# relative tolerance per kind; temporal rows use a 2-standard-deviation band instead
TOLERANCE = {"critical_time_study": 0.2, "genmodel_masking": 0.05, "ode_sweep": 1e-3}
RATIO_REL_TOL = 0.15


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class ReportRow:
    inputs: str
    quantity: str
    theory: float
    measured: float
    rel_error: float
    tolerance: str
    flagged: bool


@dataclass
class Report:
    kind: str
    rows: list[ReportRow] = field(default_factory=list)

    @property
    def n_flagged(self) -> int:
        return sum(r.flagged for r in self.rows)

    def to_markdown(self) -> str:
        head = "| inputs | quantity | theory | measured | relative error | tolerance | flag |\n"
        head += "|---|---|---|---|---|---|---|\n"
        body = "".join(
            f"| {r.inputs} | {r.quantity} | {r.theory:.6g} | {r.measured:.6g} | {r.rel_error:.3e} | "
            f"{r.tolerance} | {'EXCEEDS' if r.flagged else 'ok'} |\n" for r in self.rows)
        return f"# {self.kind}: theory vs simulation\n\n{head}{body}\n{self.n_flagged} of {len(self.rows)} rows flagged\n"


def _rel(measured, theory):
    if theory == 0:
        return abs(measured)
    return abs(measured - theory) / abs(theory)


def _load_run(d: Path):
    meta_path = d / METADATA_FILE
    if not meta_path.is_file():
        raise FileNotFoundError(f"{d}: missing {METADATA_FILE}")
    return json.loads(meta_path.read_text(encoding="utf-8"))


def _rows_of(d: Path, name: str):
    path = d / name
    if not path.is_file():
        raise FileNotFoundError(f"{d}: missing {name}")
    return read_csv(path)[1]


def _critical(rows, out):
    tol = TOLERANCE["critical_time_study"]
    for r in rows:
        th, m = float(r["t_star_formula"]), float(r["t_star_measured"])
        e = _rel(m, th)
        out.append(ReportRow(f"{r['objective']} L={r['L']} eps={r['epsilon']} lambda={r['lambda']} rho={r['rho']}",
                             "t_star", th, m, e, f"rel <= {tol}", e > tol))


def _ratio(rows, out):
    for r in rows:
        th, m = float(r["ratio_formula"]), float(r["ratio_measured"])
        L, eps = int(r["L"]), float(r["epsilon"])
        inputs = f"{r['objective']} L={L} eps={r['epsilon']} rho={r['rho']} rho'={r['rho_prime']}"
        if r["objective"] == "jepa":
            # compare the deviations from 1, which carry the whole effect
            e = _rel(m - 1.0, th - 1.0)
            out.append(ReportRow(inputs, "ratio - 1", th - 1.0, m - 1.0, e, f"rel <= {RATIO_REL_TOL}",
                                 e > RATIO_REL_TOL))
        else:
            band = 3.0 * eps ** ((L - 1) / L) if L > 1 else float("nan")
            e = abs(m - th)
            flagged = not (e <= band)
            out.append(ReportRow(inputs, "ratio", th, m, e, f"abs <= {band:.3g}", flagged))


def _temporal(rows, out):
    groups = defaultdict(list)
    for r in rows:
        groups[int(r["T_or_n"]), int(r["feature"])].append(r)
    for (T, a), rs in sorted(groups.items()):
        for q, qt in (("lambda_hat", "lambda_theory"), ("rho_hat", "rho_theory")):
            vals = np.array([float(r[q]) for r in rs])
            th = float(rs[0][qt])
            mean = float(vals.mean())
            sd = float(vals.std(ddof=1)) if len(vals) > 1 else float("nan")
            flagged = not (abs(mean - th) <= 2.0 * sd)
            out.append(ReportRow(f"T={T} feature={a} runs={len(vals)}", q, th, mean, _rel(mean, th),
                                 f"|diff| <= 2 sd = {2 * sd:.3g}", flagged))


def _masking(rows, out):
    tol = TOLERANCE["genmodel_masking"]
    for r in rows:
        for q, qt in (("lambda_hat", "lambda_theory"), ("rho_hat", "rho_theory")):
            th, m = float(r[qt]), float(r[q])
            e = _rel(m, th)
            out.append(ReportRow(f"seed={r['run_seed']} factor={r['feature']} n={r['T_or_n']}", q, th, m, e,
                                 f"rel <= {tol}", e > tol))


def _ode_sweep(d: Path, meta, out):
    from .ode import fixed_point
    p = meta["config"]["parameters"]
    tol = TOLERANCE["ode_sweep"]
    feats = list(zip(p["features"]["lambda"], p["features"]["rho"]))
    for obj in p["objectives"]:
        for L in p["depths"]:
            for k, (lam, rho) in enumerate(feats):
                rows = _rows_of(d, f"traj_{obj}_L{L}_f{k}.csv")
                m = float(rows[-1]["w_bar"])
                th = fixed_point(obj, rho, L)
                e = _rel(m, th)
                out.append(ReportRow(f"{obj} L={L} lambda={lam} rho={rho}", "final w_bar", th, m, e,
                                     f"rel <= {tol}", e > tol))


def report_theory_vs_sim(run_dirs: Sequence[str | Path], kind: str) -> Report:
    """Tabulate theory against measurements for every run in ``run_dirs``.

    Raises ``ReportError`` for an empty list, an unknown kind or a kind
    mismatch, and ``FileNotFoundError`` for missing artifacts.
    """
    if not run_dirs:
        raise ReportError("no run directories given")
    if kind not in REPORT_KINDS:
        raise ReportError(f"kind must be one of {list(REPORT_KINDS)}, got {kind!r}")
    rep = Report(kind)
    for d in map(Path, run_dirs):
        meta = _load_run(d)
        if meta.get("kind") != kind:
            raise ReportError(f"{d} holds a {meta.get('kind')!r} run, not {kind!r}")
        if kind == "critical_time_study":
            _critical(_rows_of(d, "critical_times.csv"), rep.rows)
        elif kind == "ratio_study":
            _ratio(_rows_of(d, "ratios.csv"), rep.rows)
        elif kind == "genmodel_temporal":
            _temporal(_rows_of(d, "generative.csv"), rep.rows)
        elif kind == "genmodel_masking":
            _masking(_rows_of(d, "generative.csv"), rep.rows)
        else:
            _ode_sweep(d, meta, rep.rows)
    return rep
