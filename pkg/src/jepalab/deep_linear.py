"""Deep linear encoder + linear decoder trained with the JEPA or MAE objective.

The encoder is ``Wbar = W^L ... W^1`` and the prediction is ``V Wbar x``.
JEPA regresses onto ``StopGrad(Wbar) y``, MAE onto ``y``. Both losses carry
a factor 1/2 and average over samples.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (GaussianDataSpec, Objective, SampleBatch, ValidationError, _draw_pairs, make_rng,
                   validate_spec, SamplingError)
from .ode import DivergenceError

# Network gradient-flow time t maps to reduced-ODE time L * t.
TIME_RESCALING = "L"
DIVERGENCE_THRESHOLD = 1e8


def ode_time(t_net, L: int):
    """Reduced-ODE time for network time ``t_net`` at depth ``L``."""
    return np.asarray(t_net) * L


@dataclass
class DeepLinearModel:
    layers: list[np.ndarray]
    decoder: np.ndarray
    objective: Objective

    def __post_init__(self):
        self.objective = Objective.parse(self.objective)
        if len(self.layers) < 1:
            raise ValidationError("need at least one encoder layer")
        self.layers = [np.array(w, dtype=float) for w in self.layers]
        self.decoder = np.array(self.decoder, dtype=float)
        d = self.decoder.shape[0]
        for m in self.layers + [self.decoder]:
            if m.shape != (d, d):
                raise ValidationError(f"all matrices must be {d}x{d}, got {m.shape}")
            if not np.all(np.isfinite(m)):
                raise ValidationError("model contains non-finite entries")

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def d(self) -> int:
        return self.decoder.shape[0]

    def encoder(self) -> np.ndarray:
        out = self.layers[0]
        for w in self.layers[1:]:
            out = w @ out
        return out

    def copy(self) -> "DeepLinearModel":
        return DeepLinearModel([w.copy() for w in self.layers], self.decoder.copy(), self.objective)


def haar_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR with sign correction)."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def init_structured(d: int, L: int, eps: float, objective, seed: int,
                    aligned: bool = True) -> DeepLinearModel:
    """Scaled-orthogonal layers whose relevant products start out diagonal.

    ``W^a = eps**(1/L) U^a``; the JEPA decoder is ``eps**(1/L) I`` and the MAE
    decoder ``eps**(1/L) (U^L ... U^1)^T``. With ``aligned=False`` the decoder
    is an independent scaled Haar matrix instead: still balanced, but the
    products are no longer diagonal and the layers stop commuting.
    """
    if d < 1 or L < 1:
        raise ValidationError(f"need d >= 1 and L >= 1, got d={d}, L={L}")
    if not 0 < eps < 1:
        raise ValidationError(f"eps must lie in (0, 1), got {eps}")
    objective = Objective.parse(objective)
    rng = make_rng(seed)
    scale = eps ** (1.0 / L)
    us = [haar_orthogonal(d, rng) for _ in range(L)]
    if not aligned:
        dec = haar_orthogonal(d, rng)
    elif objective is Objective.JEPA:
        dec = np.eye(d)
    else:
        prod = us[0]
        for u in us[1:]:
            prod = u @ prod
        dec = prod.T
    return DeepLinearModel([scale * u for u in us], scale * dec, objective)


def init_gaussian(d: int, L: int, scale: float, seed: int, objective=Objective.MAE) -> DeepLinearModel:
    """i.i.d. N(0, scale**2 / d) entries in every layer and the decoder."""
    if scale < 0:
        raise ValidationError(f"scale must be non-negative, got {scale}")
    rng = make_rng(seed)
    sd = scale / np.sqrt(d)
    mats = [rng.standard_normal((d, d)) * sd for _ in range(L + 1)]
    return DeepLinearModel(mats[:L], mats[L], objective)


def _as_matrix(v, d):
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        if v.shape != (d,):
            raise ValidationError(f"expected length-{d} diagonal, got {v.shape}")
        return np.diag(v)
    if v.shape != (d, d):
        raise ValidationError(f"expected {d}x{d} matrix, got {v.shape}")
    return v


def loss(model: DeepLinearModel, batch: SampleBatch) -> float:
    """Half the mean squared residual; StopGrad does not change the value."""
    if batch.d != model.d:
        raise ValidationError(f"batch has d={batch.d}, model has d={model.d}")
    wbar = model.encoder()
    pred = batch.x @ (model.decoder @ wbar).T
    target = batch.y @ wbar.T if model.objective is Objective.JEPA else batch.y
    return 0.5 * float(np.mean(np.sum((pred - target) ** 2, axis=1)))


def population_loss(model: DeepLinearModel, sxx, syx, syy=None) -> float:
    """Expected loss from second moments; ``syy`` defaults to ``sxx``."""
    d = model.d
    sxx = _as_matrix(sxx, d)
    syx = _as_matrix(syx, d)
    syy = sxx if syy is None else _as_matrix(syy, d)
    wbar = model.encoder()
    a = model.decoder @ wbar
    b = wbar if model.objective is Objective.JEPA else np.eye(d)
    # E||A x - B y||^2 = tr(A Sxx A^T) - 2 tr(A Sxy B^T) + tr(B Syy B^T)
    val = np.trace(a @ sxx @ a.T) - 2.0 * np.trace(a @ syx.T @ b.T) + np.trace(b @ syy @ b.T)
    return 0.5 * float(val)


@dataclass
class Gradients:
    layers: list[np.ndarray]
    decoder: np.ndarray

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g ** 2) for g in self.layers) + np.sum(self.decoder ** 2)))


def analytic_gradients(model: DeepLinearModel, sxx, syx) -> Gradients:
    """Exact gradients of the expected loss for second moments ``sxx``, ``syx``.

    ``syx`` is E[y x^T]. Vectors are read as diagonals. For JEPA the target
    encoder ``Wbar`` in ``Wbar y`` is held constant.
    """
    d = model.d
    sxx = _as_matrix(sxx, d)
    syx = _as_matrix(syx, d)
    L = model.L
    # prefixes[a] = W^a ... W^1 (prefixes[0] = I)
    prefixes = [np.eye(d)]
    for w in model.layers:
        prefixes.append(w @ prefixes[-1])
    wbar = prefixes[-1]
    v = model.decoder
    target = wbar @ syx if model.objective is Objective.JEPA else syx
    g = v @ wbar @ sxx - target
    grads = [None] * L
    # back = V W^L ... W^{a+1}, built from the top down
    back = v
    for a in range(L - 1, -1, -1):
        grads[a] = back.T @ g @ prefixes[a].T
        back = back @ model.layers[a]
    return Gradients(grads, g @ wbar.T)


def feature_projections(model: DeepLinearModel) -> np.ndarray:
    """Column norms ||Wbar e_i||."""
    return np.linalg.norm(model.encoder(), axis=0)


def balancedness_error(model: DeepLinearModel) -> float:
    """max_a ||W^{a+1 T} W^{a+1} - W^a W^{a T}||_F over a = 1..L with W^{L+1} = V."""
    mats = model.layers + [model.decoder]
    errs = [np.linalg.norm(mats[a + 1].T @ mats[a + 1] - mats[a] @ mats[a].T) for a in range(len(mats) - 1)]
    return float(max(errs))


@dataclass(frozen=True)
class Population:
    """Train on exact expected gradients (gradient flow by explicit Euler)."""
    sxx: np.ndarray
    syx: np.ndarray
    syy: np.ndarray | None = None

    @classmethod
    def from_spec(cls, spec: GaussianDataSpec) -> "Population":
        return cls(spec.sigma_sqs, spec.lambdas, spec.y_vars)


@dataclass(frozen=True)
class Sampled:
    """Train on fresh minibatches drawn from ``spec`` at every step."""
    spec: GaussianDataSpec
    batch_size: int
    seed: int


@dataclass
class TrainTrace:
    step_times: np.ndarray
    projections: np.ndarray
    loss: np.ndarray
    balancedness: np.ndarray
    steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    lr: float = float("nan")
    L: int = 1

    @property
    def ode_times(self) -> np.ndarray:
        return ode_time(self.step_times, self.L)


def train(model: DeepLinearModel, data: Population | Sampled, lr: float, steps: int,
          record_every: int = 1) -> TrainTrace:
    """Plain (S)GD with simultaneous updates of all layers; mutates ``model``.

    Records at step 0, every ``record_every`` steps and at the last step.
    ``step_times`` are ``step * lr`` (network gradient-flow time).
    """
    if not lr > 0:
        raise ValidationError(f"lr must be positive, got {lr}")
    if steps < 0:
        raise ValidationError(f"steps must be >= 0, got {steps}")
    if record_every < 1:
        raise ValidationError(f"record_every must be >= 1, got {record_every}")
    d = model.d
    if isinstance(data, Population):
        sxx, syx = _as_matrix(data.sxx, d), _as_matrix(data.syx, d)
        syy = None if data.syy is None else _as_matrix(data.syy, d)
        rng = None

        def moments():
            return sxx, syx

        def current_loss():
            return population_loss(model, sxx, syx, syy)
    elif isinstance(data, Sampled):
        spec = data.spec
        if spec.d != d:
            raise ValidationError(f"spec has d={spec.d}, model has d={d}")
        bad = [v for v in validate_spec(spec, for_sampling=True) if v.kind != "nonpositive_lambda"]
        if bad:
            raise SamplingError("; ".join(str(v) for v in bad))
        rng = make_rng(data.seed)
        s2, lam, yv = spec.sigma_sqs, spec.lambdas, spec.y_vars
        last = {}

        def moments():
            b = _draw_pairs(s2, lam, yv, data.batch_size, rng)
            last["batch"] = b
            n = b.n
            return b.x.T @ b.x / n, b.y.T @ b.x / n

        def current_loss():
            b = last.get("batch")
            return loss(model, b) if b is not None else population_loss(model, s2, lam, yv)
    else:
        raise ValidationError(f"unknown data mode {type(data).__name__}")

    rec_steps, projs, losses, bal = [], [], [], []

    def record(step):
        rec_steps.append(step)
        projs.append(feature_projections(model))
        losses.append(current_loss())
        bal.append(balancedness_error(model))

    record(0)
    # a blow-up can overflow inside one step; _check_finite reports it as DivergenceError
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, steps + 1):
            sxx_t, syx_t = moments()
            g = analytic_gradients(model, sxx_t, syx_t)
            for w, gw in zip(model.layers, g.layers):
                w -= lr * gw
            model.decoder -= lr * g.decoder
            if step % record_every == 0 or step == steps:
                _check_finite(model, step)
                record(step)
            elif step % 16 == 0:
                _check_finite(model, step)
    steps_arr = np.asarray(rec_steps, dtype=int)
    return TrainTrace(steps_arr * lr, np.asarray(projs), np.asarray(losses), np.asarray(bal),
                      steps=steps_arr, lr=lr, L=model.L)


def train_with_fallback(make_model, data: Population | Sampled, lr: float, steps: int,
                        record_every: int = 1, max_halvings: int = 4) -> tuple[TrainTrace, float]:
    """Run :func:`train`, halving ``lr`` and restarting from a fresh model on divergence.

    ``make_model`` is called once per attempt so every retry starts from the
    same initialization. Returns the trace and the learning rate that succeeded.
    """
    for attempt in range(max_halvings + 1):
        try:
            return train(make_model(), data, lr, steps, record_every), lr
        except DivergenceError:
            if attempt == max_halvings:
                raise
            lr *= 0.5
    raise AssertionError("unreachable")


def _check_finite(model, step):
    for m in model.layers + [model.decoder]:
        if not np.all(np.isfinite(m)) or np.max(np.abs(m)) > DIVERGENCE_THRESHOLD:
            raise DivergenceError(f"training diverged at step {step}")


@dataclass(frozen=True)
class LearningOrder:
    order: list[int]
    crossing_times: np.ndarray
    learned: np.ndarray


def learning_order(trace: TrainTrace, p: float = 0.5, final: Sequence[float] | None = None,
                   features: Sequence[int] | None = None) -> LearningOrder:
    """Order features by the first time their projection reaches ``p * final``.

    ``final`` defaults to the last recorded projections. Features that never
    cross are unlearned and go last, by descending final projection.
    ``features`` restricts the ranking to a subset of column indices.
    """
    if not 0 < p < 1:
        raise ValidationError(f"p must lie in (0, 1), got {p}")
    proj = trace.projections
    idx = np.arange(proj.shape[1]) if features is None else np.asarray(features, dtype=int)
    fin = proj[-1] if final is None else np.asarray(final, dtype=float)
    if fin.shape[0] == proj.shape[1]:
        fin = fin[idx]
    times = np.full(len(idx), np.nan)
    t = trace.step_times
    for k, i in enumerate(idx):
        level = p * fin[k]
        col = proj[:, i]
        hit = np.flatnonzero(col >= level)
        if hit.size == 0:
            continue
        j = hit[0]
        if j == 0:
            times[k] = t[0]
        else:
            times[k] = t[j - 1] + (level - col[j - 1]) * (t[j] - t[j - 1]) / (col[j] - col[j - 1])
    learned = np.isfinite(times)
    lk = [k for k in np.argsort(np.where(learned, times, np.inf), kind="stable") if learned[k]]
    uk = sorted((k for k in range(len(idx)) if not learned[k]), key=lambda k: -proj[-1, idx[k]])
    order = [int(idx[k]) for k in lk + uk]
    return LearningOrder(order, times, learned)
