"""Declarative experiment configs (JSON) with strict validation.

A config is ``{"name": ..., "kind": ..., "parameters": {...}}`` plus an
optional ``"output_dir"``. Every kind has its own parameter dataclass below;
unknown keys anywhere are rejected and errors name the offending field path,
e.g. ``parameters.init.eps``.
"""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Union

KINDS = ("ode_sweep", "net_train", "critical_time_study", "genmodel_temporal", "genmodel_masking",
         "ratio_study")


class ConfigError(ValueError):
    """Invalid config; ``path`` is the dotted location of the problem."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


# --------------------------------------------------------------------------
# parameter schemas

@dataclass(frozen=True)
class FeatureGrid:
    """Feature list as parallel lambda / rho arrays."""
    lam: list[float]
    rho: list[float]

    def __post_init__(self):
        if len(self.lam) != len(self.rho):
            raise ConfigError("lambda", f"lambda has {len(self.lam)} entries but rho has {len(self.rho)}")
        if not self.lam:
            raise ConfigError("lambda", "need at least one feature")

    def pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.lam, self.rho))


@dataclass(frozen=True)
class OdeSweepParams:
    objectives: list[Literal["jepa", "mae"]]
    depths: list[int]
    epsilon: float
    features: FeatureGrid
    n_grid: int = 400
    t_end: Union[float, Literal["auto"]] = "auto"
    log_time: bool = True


@dataclass(frozen=True)
class CriticalTimeParams:
    objectives: list[Literal["jepa", "mae"]]
    depths: list[int]
    epsilons: list[float]
    lambdas: list[float]
    rhos: list[float]
    p: float = 0.5


@dataclass(frozen=True)
class RatioParams:
    objectives: list[Literal["jepa", "mae"]]
    depths: list[int]
    epsilons: list[float]
    lam: float
    rho: float
    rho_prime: float
    p: float = 0.5


@dataclass(frozen=True)
class InitParams:
    kind: Literal["structured", "gaussian"]
    eps: Optional[float] = None
    scale: Optional[float] = None

    def __post_init__(self):
        if self.kind == "structured" and self.eps is None:
            raise ConfigError("eps", "structured init needs eps")
        if self.kind == "gaussian" and self.scale is None:
            raise ConfigError("scale", "gaussian init needs scale")


@dataclass(frozen=True)
class DistinguishedFeatures:
    indices: list[int]
    lam: list[float]
    rho: list[float]
    residual_var: float = 0.02


@dataclass(frozen=True)
class Background:
    sigma_sq: float = 1.0
    y_var: float = 1.0


@dataclass(frozen=True)
class NetTrainParams:
    d: int
    L: int
    objectives: list[Literal["jepa", "mae"]]
    features: DistinguishedFeatures
    init: InitParams
    lr: float
    steps: int
    seeds: list[int]
    batch_size: Optional[int] = None
    background: Background = field(default_factory=Background)
    record_every: int = 1
    max_lr_halvings: int = 4
    p: float = 0.5
    order_reference: Literal["theory", "final"] = "theory"


@dataclass(frozen=True)
class TemporalParams:
    block_sizes: list[int]
    autocorr: list[float]
    noise_std: list[float]
    lengths: list[int]
    seeds: list[int]
    image_norms: Optional[list[float]] = None
    burn_in: Optional[int] = None
    heatmap: bool = True


@dataclass(frozen=True)
class MaskingCoefficients:
    """``values`` for the first ``len(values)`` factors; the rest get ``rest``."""
    values: list[float]
    rest: float = 0.0


@dataclass(frozen=True)
class MaskingParams:
    d: int
    f: float
    coefficients: MaskingCoefficients
    noise_var: float
    basis_seed: int
    n: int
    seeds: list[int]
    basis: Literal["haar", "gaussian"] = "haar"
    chunk: int = 8192
    min_excess: float = 2.0


PARAMS_BY_KIND = {
    "ode_sweep": OdeSweepParams,
    "net_train": NetTrainParams,
    "critical_time_study": CriticalTimeParams,
    "genmodel_temporal": TemporalParams,
    "genmodel_masking": MaskingParams,
    "ratio_study": RatioParams,
}

# JSON key -> dataclass attribute where Python reserves the name
_ALIASES = {"lambda": "lam"}
_REVERSE = {v: k for k, v in _ALIASES.items()}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    kind: str
    parameters: object
    output_dir: Optional[str] = None
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def seeds(self) -> list[int] | None:
        return getattr(self.parameters, "seeds", None)

    def with_seed_override(self, seed: int) -> "ExperimentConfig":
        """Replace the seed list by ``seed, seed+1, ...`` (same length)."""
        if self.seeds is None:
            return self
        seeds = [seed + i for i in range(len(self.seeds))]
        raw = json.loads(json.dumps(self.raw))
        raw["parameters"]["seeds"] = seeds
        return parse_config(raw)


# --------------------------------------------------------------------------
# strict parsing

def _join(path, key):
    return f"{path}.{key}" if path else str(key)


def _parse_value(tp, value, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _parse_value(a, value, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(path, "; ".join(errors) or "invalid value")
    if origin is Literal:
        if value not in args:
            raise ConfigError(path, f"expected one of {list(args)}, got {value!r}")
        return value
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return [_parse_value(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        return _parse_dataclass(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported schema type {tp!r}")


def _parse_dataclass(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        attr = _ALIASES.get(key, key)
        if attr not in fields or key in _REVERSE:
            raise ConfigError(_join(path, key), "unknown field")
        kwargs[attr] = _parse_value(hints[attr], value, _join(path, key))
    for name, f in fields.items():
        if name in kwargs:
            continue
        if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(_join(path, _REVERSE.get(name, name)), "required field missing")
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(_join(path, exc.path), str(exc).split(": ", 1)[-1]) from None


def _check_semantics(kind, p, path="parameters"):
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(_join(path, key), msg)

    seeds = getattr(p, "seeds", None)
    if seeds is not None:
        need(len(seeds) > 0, "seeds", "at least one explicit seed is required")
        need(len(set(seeds)) == len(seeds), "seeds", "seeds must be distinct")
    if hasattr(p, "objectives"):
        need(len(p.objectives) > 0, "objectives", "at least one objective is required")
    if hasattr(p, "depths"):
        need(len(p.depths) > 0 and all(L >= 1 for L in p.depths), "depths", "need depths >= 1")
    if hasattr(p, "p"):
        need(0 < p.p < 1, "p", "p must lie in (0, 1)")
    if kind == "ode_sweep":
        need(p.epsilon > 0, "epsilon", "epsilon must be positive")
        need(p.n_grid >= 2, "n_grid", "n_grid must be >= 2")
        need(p.t_end == "auto" or p.t_end > 0, "t_end", "t_end must be 'auto' or positive")
        need(all(x > 0 for x in p.features.lam), "features.lambda", "lambda must be positive")
        need(all(x > 0 for x in p.features.rho), "features.rho", "rho must be positive")
    elif kind in ("critical_time_study", "ratio_study"):
        need(len(p.epsilons) > 0 and all(0 < e < 1 for e in p.epsilons), "epsilons", "need epsilons in (0, 1)")
        if kind == "critical_time_study":
            need(len(p.lambdas) > 0 and all(x > 0 for x in p.lambdas), "lambdas", "need positive lambdas")
            need(len(p.rhos) > 0 and all(x > 0 for x in p.rhos), "rhos", "need positive rhos")
        else:
            need(p.lam > 0, "lambda", "lambda must be positive")
            need(p.rho > 0 and p.rho_prime > 0, "rho", "rho and rho_prime must be positive")
    elif kind == "net_train":
        f = p.features
        need(p.d >= 1, "d", "d must be >= 1")
        need(p.L >= 1, "L", "L must be >= 1")
        need(len(f.indices) == len(f.lam) == len(f.rho) and len(f.indices) > 0, "features",
             "indices, lambda and rho need equal, non-zero length")
        need(all(0 <= i < p.d for i in f.indices) and len(set(f.indices)) == len(f.indices),
             "features.indices", f"indices must be distinct and lie in [0, {p.d})")
        need(all(x > 0 for x in f.rho), "features.rho", "rho must be positive")
        need(f.residual_var >= 0, "features.residual_var", "residual_var must be >= 0")
        need(p.lr > 0, "lr", "lr must be positive")
        need(p.steps >= 0, "steps", "steps must be >= 0")
        need(p.record_every >= 1, "record_every", "record_every must be >= 1")
        need(p.batch_size is None or p.batch_size >= 1, "batch_size", "batch_size must be >= 1 or null")
        need(p.background.sigma_sq > 0 and p.background.y_var > 0, "background", "variances must be positive")
        if p.init.kind == "structured":
            need(0 < p.init.eps < 1, "init.eps", "eps must lie in (0, 1)")
        else:
            need(p.init.scale >= 0, "init.scale", "scale must be >= 0")
    elif kind == "genmodel_temporal":
        m = len(p.block_sizes)
        need(m > 0, "block_sizes", "need at least one image")
        need(len(p.autocorr) == m, "autocorr", "one entry per image required")
        need(len(p.noise_std) == m, "noise_std", "one entry per image required")
        need(p.image_norms is None or len(p.image_norms) == m, "image_norms", "one entry per image required")
        need(len(p.lengths) > 0 and all(T >= 2 for T in p.lengths), "lengths", "need lengths >= 2")
    elif kind == "genmodel_masking":
        need(p.d >= 1, "d", "d must be >= 1")
        need(len(p.coefficients.values) <= p.d, "coefficients.values", "more values than factors")
        need(p.n >= 2, "n", "n must be >= 2")
        need(p.chunk >= 1, "chunk", "chunk must be >= 1")


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a JSON object")
    allowed = {"name", "kind", "parameters", "output_dir"}
    for key in data:
        if key not in allowed:
            raise ConfigError(key, "unknown field")
    for key in ("name", "kind", "parameters"):
        if key not in data:
            raise ConfigError(key, "required field missing")
    name = _parse_value(str, data["name"], "name")
    kind = data["kind"]
    if kind not in KINDS:
        raise ConfigError("kind", f"expected one of {list(KINDS)}, got {kind!r}")
    params = _parse_dataclass(PARAMS_BY_KIND[kind], data["parameters"], "parameters")
    _check_semantics(kind, params)
    out = data.get("output_dir")
    if out is not None:
        out = _parse_value(str, out, "output_dir")
    raw = json.loads(json.dumps(data))
    return ExperimentConfig(name, kind, params, out, raw)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path} is not valid JSON: {exc}") from None
    return parse_config(data)


def bundled_dir() -> Path:
    return Path(__file__).resolve().parent / "configs"


def bundled_configs() -> dict[str, Path]:
    return {p.stem: p for p in sorted(bundled_dir().glob("*.json"))}


def resolve_config(name_or_path: str) -> Path:
    """A path to an existing file, or the stem of a bundled config."""
    p = Path(name_or_path)
    if p.is_file():
        return p
    stem = p.stem if p.suffix == ".json" else name_or_path
    bundled = bundled_configs()
    if stem in bundled:
        return bundled[stem]
    raise ConfigError("", f"no config file or bundled experiment named {name_or_path!r}")
