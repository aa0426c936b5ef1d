"""Data distribution types, validation, population covariances and sampling.

Every feature is a decoupled coordinate ``i`` with input variance
``sigma_sq``, input/target cross-covariance ``lambda_`` and target variance
``y_var``. All covariance matrices are diagonal in the standard basis.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when a parameter set violates a documented invariant."""


class SamplingError(ValueError):
    """Raised when a spec cannot be realised as a joint Gaussian."""


class Objective(str, enum.Enum):
    JEPA = "jepa"
    MAE = "mae"

    @classmethod
    def parse(cls, value: "Objective | str") -> "Objective":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValidationError(f"unknown objective {value!r}; expected 'jepa' or 'mae'") from None


@dataclass(frozen=True)
class FeatureParams:
    """Second-order statistics of one coordinate.

    ``y_var`` defaults to ``sigma_sq`` (only the sampler uses it).
    """

    lambda_: float
    sigma_sq: float
    y_var: float | None = None

    def __post_init__(self):
        if self.y_var is None:
            object.__setattr__(self, "y_var", float(self.sigma_sq))

    @property
    def rho(self) -> float:
        return regression_coefficient(self)

    @classmethod
    def from_rho(cls, lambda_: float, rho: float, y_var: float | None = None) -> "FeatureParams":
        """Build from the cross-covariance and regression coefficient."""
        if rho == 0:
            raise ValidationError("rho must be non-zero to recover sigma_sq")
        return cls(lambda_=lambda_, sigma_sq=lambda_ / rho, y_var=y_var)


@dataclass(frozen=True)
class GaussianDataSpec:
    features: tuple[FeatureParams, ...]

    def __init__(self, features: Sequence[FeatureParams]):
        object.__setattr__(self, "features", tuple(features))

    @property
    def d(self) -> int:
        return len(self.features)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([f.lambda_ for f in self.features], dtype=float)

    @property
    def sigma_sqs(self) -> np.ndarray:
        return np.array([f.sigma_sq for f in self.features], dtype=float)

    @property
    def y_vars(self) -> np.ndarray:
        return np.array([f.y_var for f in self.features], dtype=float)

    @property
    def rhos(self) -> np.ndarray:
        return self.lambdas / self.sigma_sqs

    @classmethod
    def from_arrays(cls, lambdas, sigma_sqs, y_vars=None) -> "GaussianDataSpec":
        lambdas = np.atleast_1d(np.asarray(lambdas, dtype=float))
        sigma_sqs = np.broadcast_to(np.asarray(sigma_sqs, dtype=float), lambdas.shape)
        if y_vars is None:
            y_vars = [None] * len(lambdas)
        else:
            y_vars = np.broadcast_to(np.asarray(y_vars, dtype=float), lambdas.shape)
        return cls([FeatureParams(float(l), float(s), None if v is None else float(v))
                    for l, s, v in zip(lambdas, sigma_sqs, y_vars)])


@dataclass(frozen=True)
class SampleBatch:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 2 or y.ndim != 2 or x.shape != y.shape:
            raise ValidationError(f"x and y must be n x d matrices of equal shape, got {x.shape} and {y.shape}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValidationError("sample batch contains non-finite entries")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


def regression_coefficient(p: FeatureParams) -> float:
    if not p.sigma_sq > 0:
        raise ValidationError(f"sigma_sq must be positive, got {p.sigma_sq}")
    return p.lambda_ / p.sigma_sq


@dataclass(frozen=True)
class Violation:
    feature: int
    kind: str
    message: str

    def __str__(self):
        return f"feature {self.feature}: {self.message}"


def validate_spec(spec: GaussianDataSpec, for_sampling: bool = False) -> list[Violation]:
    """Return every invariant violation of ``spec`` (empty when valid).

    Non-positive ``lambda_`` is reported with kind ``"nonpositive_lambda"``:
    representable, but outside the dynamics theory.
    """
    out: list[Violation] = []
    if spec.d < 1:
        out.append(Violation(-1, "empty", "spec has no features"))
    for i, f in enumerate(spec.features):
        vals = (f.lambda_, f.sigma_sq, f.y_var)
        if not all(np.isfinite(v) for v in vals):
            out.append(Violation(i, "nonfinite", f"non-finite parameter in {vals}"))
            continue
        if f.sigma_sq <= 0:
            out.append(Violation(i, "sigma_sq", f"sigma_sq={f.sigma_sq} is not positive"))
        if f.y_var <= 0:
            out.append(Violation(i, "y_var", f"y_var={f.y_var} is not positive"))
        if f.lambda_ <= 0:
            out.append(Violation(i, "nonpositive_lambda",
                                 f"lambda={f.lambda_} is not positive (outside dynamics theory)"))
        if for_sampling and f.lambda_ ** 2 > f.sigma_sq * f.y_var:
            out.append(Violation(i, "psd",
                                 f"lambda^2={f.lambda_ ** 2:g} exceeds sigma_sq*y_var={f.sigma_sq * f.y_var:g}"))
    return out


def population_covariances(spec: GaussianDataSpec) -> tuple[np.ndarray, np.ndarray]:
    """Diagonals of (Sigma_xx, Sigma_yx)."""
    return spec.sigma_sqs.copy(), spec.lambdas.copy()


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """PCG64 generator; the single construction point for all randomness."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def sample_gaussian_pairs(spec: GaussianDataSpec, n: int, seed: int | np.random.SeedSequence
                          ) -> SampleBatch:
    """Draw ``n`` rows with per-coordinate joint covariance [[s2, lam], [lam, yv]].

    Constructed as ``y = rho * x + nu`` with ``nu ~ N(0, yv - lam^2 / s2)``.
    """
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    bad = [v for v in validate_spec(spec, for_sampling=True) if v.kind != "nonpositive_lambda"]
    if bad:
        raise SamplingError("; ".join(str(v) for v in bad))
    return _draw_pairs(spec.sigma_sqs, spec.lambdas, spec.y_vars, n, make_rng(seed))


def _draw_pairs(s2, lam, yv, n, rng):
    sd_x = np.sqrt(s2)
    rho = lam / s2
    resid = np.sqrt(np.maximum(yv - lam ** 2 / s2, 0.0))
    x = rng.standard_normal((n, len(s2))) * sd_x
    y = rho * x + rng.standard_normal((n, len(s2))) * resid
    return SampleBatch(x, y)
