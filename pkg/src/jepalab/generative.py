"""Linear generative models whose view covariances share an eigenbasis.

Two samplers are provided:

* a random-masking model, where a sparse latent-factor signal plus isotropic
  noise is split into two complementary Bernoulli-masked views, and
* a temporal model, where fixed orthogonal images are modulated by AR(1)
  amplitudes and the views are consecutive frames.

Both come with closed-form per-direction (sigma^2, lambda, rho), streaming
covariance estimators and a simultaneous-diagonalizability diagnostic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .core import FeatureParams, SampleBatch, ValidationError, make_rng
from .deep_linear import haar_orthogonal

BASIS_KINDS = ("haar", "gaussian")
# rows generated per chunk by the streaming estimators
CHUNK_ROWS = 8192
# relative eigenvalue gap below which eigenvectors of Sxx count as degenerate
DEGENERACY_RTOL = 1e-8


# --------------------------------------------------------------------------
# masking model

@dataclass(frozen=True)
class MaskingSpec:
    """Masked-view model ``z = sum_k s_k B_k + eta``, ``x = z*m``, ``y = z*(1-m)``.

    Parameters
    ----------
    d : int
        Ambient dimension; also the number of latent factors.
    f : float
        Keep probability of the Bernoulli mask, in (0, 1).
    coeff_vars : array_like, shape (d,)
        Factor variances ``<s_k^2>``. Zeros encode inactive factors.
    noise_var : float
        Isotropic noise variance ``<eta^2>``.
    basis_seed : int
        Seed for the factor basis ``B``.
    basis : {"haar", "gaussian"}
        ``"haar"`` draws a Haar-orthogonal ``B`` (entries asymptotically
        N(0, 1/d), columns exactly unit norm); ``"gaussian"`` uses i.i.d.
        N(0, 1/d) entries, whose columns are only approximately orthonormal.
    """

    d: int
    f: float
    coeff_vars: np.ndarray
    noise_var: float
    basis_seed: int
    basis: str = "haar"

    def __post_init__(self):
        cv = np.asarray(self.coeff_vars, dtype=float).copy()
        if self.d < 1:
            raise ValidationError(f"d must be >= 1, got {self.d}")
        if cv.shape != (self.d,):
            raise ValidationError(f"coeff_vars must have length d={self.d}, got shape {cv.shape}")
        if not 0 < self.f < 1:
            raise ValidationError(f"f must lie in (0, 1), got {self.f}")
        if not (np.all(np.isfinite(cv)) and np.all(cv >= 0)):
            raise ValidationError("coeff_vars must be finite and non-negative")
        if not (math.isfinite(self.noise_var) and self.noise_var >= 0):
            raise ValidationError(f"noise_var must be finite and >= 0, got {self.noise_var}")
        if self.basis not in BASIS_KINDS:
            raise ValidationError(f"basis must be one of {BASIS_KINDS}, got {self.basis!r}")
        cv.setflags(write=False)
        object.__setattr__(self, "coeff_vars", cv)

    @property
    def mean_coeff_var(self) -> float:
        return float(np.mean(self.coeff_vars))

    def basis_matrix(self) -> np.ndarray:
        """Columns are the factor directions ``B_k``."""
        rng = make_rng(self.basis_seed)
        if self.basis == "haar":
            return haar_orthogonal(self.d, rng)
        return rng.standard_normal((self.d, self.d)) / np.sqrt(self.d)


def masking_theoretical_params(spec: MaskingSpec) -> list[FeatureParams]:
    """Large-d (sigma^2, lambda) of every factor direction.

    Factors with ``<s_i^2>`` below the mean get ``lambda < 0``; see
    :func:`below_average_factors`.
    """
    f = spec.f
    s2 = spec.coeff_vars
    mean = spec.mean_coeff_var
    eta = spec.noise_var
    sig = f * f * s2 + f * eta + (f - f * f) * mean
    lam = f * (1.0 - f) * (s2 - mean)
    yv = (1.0 - f) ** 2 * s2 + (1.0 - f) * eta + (f - f * f) * mean
    return [FeatureParams(float(l), float(s), float(v)) for l, s, v in zip(lam, sig, yv)]


def below_average_factors(spec: MaskingSpec) -> np.ndarray:
    """Indices whose cross-covariance is not positive."""
    return np.flatnonzero(spec.coeff_vars <= spec.mean_coeff_var)


def _masked_chunk(spec, basis, active, n, rng):
    d = spec.d
    s = rng.standard_normal((n, active.size)) * np.sqrt(spec.coeff_vars[active])
    z = s @ basis[:, active].T
    if spec.noise_var > 0:
        z += rng.standard_normal((n, d)) * np.sqrt(spec.noise_var)
    m = rng.random((n, d)) < spec.f
    return np.where(m, z, 0.0), np.where(m, 0.0, z)


def _chunk_sizes(n: int, chunk: int) -> list[int]:
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    if chunk < 1:
        raise ValidationError(f"chunk must be >= 1, got {chunk}")
    full, rest = divmod(n, chunk)
    return [chunk] * full + ([rest] if rest else [])


def _masked_chunks(spec, n, seed, chunk):
    basis = spec.basis_matrix()
    active = np.flatnonzero(spec.coeff_vars > 0)
    sizes = _chunk_sizes(n, chunk)
    for size, ss in zip(sizes, np.random.SeedSequence(seed).spawn(len(sizes))):
        yield _masked_chunk(spec, basis, active, size, make_rng(ss))


def sample_masked_views(spec: MaskingSpec, n: int, seed: int, chunk: int = CHUNK_ROWS) -> SampleBatch:
    """Draw ``n`` masked view pairs.

    Rows are produced in chunks of ``chunk`` with one spawned seed per chunk,
    so the output matches :func:`masking_covariances` for the same arguments.
    """
    xs, ys = zip(*_masked_chunks(spec, n, seed, chunk))
    return SampleBatch(np.concatenate(xs), np.concatenate(ys))


# --------------------------------------------------------------------------
# covariance estimation

@dataclass(frozen=True)
class CovarianceEstimate:
    sxx: np.ndarray
    sxy: np.ndarray
    n: int

    def __post_init__(self):
        sxx = np.array(self.sxx, dtype=float)
        sxy = np.array(self.sxy, dtype=float)
        if sxx.ndim != 2 or sxx.shape[0] != sxx.shape[1] or sxy.shape != sxx.shape:
            raise ValidationError(f"need matching square matrices, got {sxx.shape} and {sxy.shape}")
        if self.n < 2:
            raise ValidationError(f"need n >= 2 samples, got {self.n}")
        if not np.allclose(sxx, sxx.T, rtol=1e-10, atol=1e-12 * max(1.0, float(np.abs(sxx).max()))):
            raise ValidationError("sxx is not symmetric")
        sxx.setflags(write=False)
        sxy.setflags(write=False)
        object.__setattr__(self, "sxx", sxx)
        object.__setattr__(self, "sxy", sxy)

    @property
    def d(self) -> int:
        return self.sxx.shape[0]

    def project(self, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Quadratic forms ``u^T Sxx u`` and ``u^T Sxy u`` for unit-normalised columns ``u``."""
        u = np.asarray(directions, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        u = u / np.linalg.norm(u, axis=0)
        sig = np.einsum("ik,ij,jk->k", u, self.sxx, u)
        lam = np.einsum("ik,ij,jk->k", u, self.sxy, u)
        return sig, lam


class CovarianceAccumulator:
    """Running sums of ``X^T X`` and ``X^T Y``.

    Chunks must be added (or merged) in a fixed order for bit-identical
    results; floating-point addition is not associative.
    """

    def __init__(self, d: int):
        self.d = d
        self.sxx = np.zeros((d, d))
        self.sxy = np.zeros((d, d))
        self.n = 0

    def add(self, x: np.ndarray, y: np.ndarray) -> "CovarianceAccumulator":
        if x.shape != y.shape or x.ndim != 2 or x.shape[1] != self.d:
            raise ValidationError(f"expected two n x {self.d} arrays, got {x.shape} and {y.shape}")
        self.sxx += x.T @ x
        self.sxy += x.T @ y
        self.n += x.shape[0]
        return self

    def merge(self, other: "CovarianceAccumulator") -> "CovarianceAccumulator":
        if other.d != self.d:
            raise ValidationError("cannot merge accumulators of different dimension")
        self.sxx += other.sxx
        self.sxy += other.sxy
        self.n += other.n
        return self

    def estimate(self) -> CovarianceEstimate:
        # x^T x is symmetric in exact arithmetic; BLAS may differ in the last bit
        sxx = 0.5 * (self.sxx + self.sxx.T)
        return CovarianceEstimate(sxx / self.n, self.sxy / self.n, self.n)


def empirical_covariances(batch: SampleBatch) -> CovarianceEstimate:
    """Uncentred second moments ``X^T X / n`` and ``X^T Y / n``.

    No means are subtracted; every sampler here is zero-mean by construction.
    """
    if batch.n < 2:
        raise ValidationError(f"need n >= 2 samples, got {batch.n}")
    return CovarianceAccumulator(batch.d).add(batch.x, batch.y).estimate()


def masking_covariances(spec: MaskingSpec, n: int, seed: int, chunk: int = CHUNK_ROWS) -> CovarianceEstimate:
    """Streaming estimate for the masking model; memory is O(chunk * d + d^2)."""
    acc = CovarianceAccumulator(spec.d)
    for x, y in _masked_chunks(spec, n, seed, chunk):
        acc.add(x, y)
    return acc.estimate()


def diagonalizability_error(est: CovarianceEstimate, degenerate: str = "secondary") -> float:
    """Mean squared off-diagonal entry of ``Q^T Sxy Q``, ``Q`` an eigenbasis of ``Sxx``.

    Parameters
    ----------
    est : CovarianceEstimate
    degenerate : {"secondary", "raw"}
        How to pick ``Q`` inside eigenspaces of ``Sxx`` whose eigenvalues are
        closer than ``DEGENERACY_RTOL * ||Sxx||``. ``"secondary"`` rotates each
        such block to diagonalise the symmetrised projection of ``Sxy``, so the
        result does not depend on the LAPACK choice. ``"raw"`` keeps the
        eigenvectors returned by ``numpy.linalg.eigh``.
    """
    if degenerate not in ("secondary", "raw"):
        raise ValidationError(f"degenerate must be 'secondary' or 'raw', got {degenerate!r}")
    d = est.d
    if d < 2:
        return 0.0
    try:
        evals, q = np.linalg.eigh(est.sxx)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigendecomposition of sxx failed: {exc}") from exc
    if degenerate == "secondary":
        q = _refine_degenerate(evals, q, est.sxy)
    m = q.T @ est.sxy @ q
    off = m[~np.eye(d, dtype=bool)]
    return float(np.mean(off ** 2))


def _refine_degenerate(evals, q, sxy):
    tol = DEGENERACY_RTOL * max(float(np.max(np.abs(evals))), np.finfo(float).tiny)
    q = q.copy()
    start = 0
    d = len(evals)
    for i in range(1, d + 1):
        if i < d and evals[i] - evals[i - 1] < tol:
            continue
        if i - start > 1:
            block = q[:, start:i]
            proj = block.T @ sxy @ block
            _, rot = np.linalg.eigh(0.5 * (proj + proj.T))
            q[:, start:i] = block @ rot
        start = i
    return q


# --------------------------------------------------------------------------
# temporal model

@dataclass(frozen=True)
class TemporalSpec:
    """Images ``v^a`` flickered by AR(1) amplitudes plus per-block noise.

    ``noise_std[a]`` applies on the support of image ``a``; coordinates
    outside every support carry no signal and no noise. ``burn_in=None``
    selects ``ceil(10 / (1 - max(autocorr)))``.
    """

    images: tuple[np.ndarray, ...]
    autocorr: np.ndarray
    noise_std: np.ndarray
    T: int
    burn_in: int | None = None

    def __post_init__(self):
        imgs = tuple(np.asarray(v, dtype=float).copy() for v in self.images)
        gam = np.atleast_1d(np.asarray(self.autocorr, dtype=float)).copy()
        sd = np.atleast_1d(np.asarray(self.noise_std, dtype=float)).copy()
        if not imgs:
            raise ValidationError("need at least one image")
        d = imgs[0].shape
        if len(d) != 1 or any(v.shape != d for v in imgs):
            raise ValidationError("images must be 1-d vectors of equal length")
        if gam.shape != (len(imgs),) or sd.shape != (len(imgs),):
            raise ValidationError("autocorr and noise_std need one entry per image")
        if not np.all((gam > 0) & (gam < 1)):
            raise ValidationError(f"autocorr must lie in (0, 1), got {gam}")
        if not np.all(sd >= 0):
            raise ValidationError(f"noise_std must be non-negative, got {sd}")
        supports = np.array([v != 0 for v in imgs])
        if np.any(supports.sum(axis=0) > 1):
            raise ValidationError("image supports must be pairwise disjoint")
        if np.any(supports.sum(axis=1) == 0):
            raise ValidationError("every image needs a non-empty support")
        if self.T < 2:
            raise ValidationError(f"T must be >= 2, got {self.T}")
        burn = self.burn_in
        if burn is None:
            burn = math.ceil(10.0 / (1.0 - float(gam.max())))
        if burn < 0:
            raise ValidationError(f"burn_in must be >= 0, got {burn}")
        for arr in imgs + (gam, sd):
            arr.setflags(write=False)
        object.__setattr__(self, "images", imgs)
        object.__setattr__(self, "autocorr", gam)
        object.__setattr__(self, "noise_std", sd)
        object.__setattr__(self, "burn_in", int(burn))

    @property
    def d(self) -> int:
        return self.images[0].shape[0]

    @property
    def M(self) -> int:
        return len(self.images)

    def image_matrix(self) -> np.ndarray:
        """d x M matrix with the images as columns."""
        return np.stack(self.images, axis=1)

    def pixel_noise_std(self) -> np.ndarray:
        out = np.zeros(self.d)
        for v, s in zip(self.images, self.noise_std):
            out[v != 0] = s
        return out

    def with_length(self, T: int) -> "TemporalSpec":
        return TemporalSpec(self.images, self.autocorr, self.noise_std, T, self.burn_in)


def block_images(block_sizes: Sequence[int], norms: Sequence[float] | None = None) -> tuple[np.ndarray, ...]:
    """Constant images on consecutive index blocks, scaled to the given norms."""
    sizes = [int(b) for b in block_sizes]
    if any(b < 1 for b in sizes):
        raise ValidationError(f"block sizes must be >= 1, got {sizes}")
    norms = [1.0] * len(sizes) if norms is None else list(norms)
    d = sum(sizes)
    out = []
    start = 0
    for b, nv in zip(sizes, norms):
        v = np.zeros(d)
        v[start:start + b] = nv / math.sqrt(b)
        out.append(v)
        start += b
    return tuple(out)


def fig3_temporal_spec(T: int = 500_000, block: int = 16) -> TemporalSpec:
    """Two unit-norm block images with (gamma, noise std) = (0.99, 1) and (0.95, 0.5)."""
    return TemporalSpec(block_images([block, block]), [0.99, 0.95], [1.0, 0.5], T)


def ar1_paths(autocorr: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Stationary unit-variance AR(1) paths, one column per coefficient.

    ``u(t+1) = g u(t) + sqrt(1 - g^2) eta_t`` with ``u(1) ~ N(0, 1)``.
    """
    gam = np.asarray(autocorr, dtype=float)
    shocks = rng.standard_normal((length, gam.size))
    shocks[1:] *= np.sqrt(1.0 - gam ** 2)
    out = np.empty_like(shocks)
    for a, g in enumerate(gam):
        out[:, a] = lfilter([1.0], [1.0, -g], shocks[:, a])
    return out


def simulate_temporal(spec: TemporalSpec, seed: int) -> np.ndarray:
    """T x d array of frames ``z^t`` after discarding ``burn_in`` steps."""
    rng = make_rng(seed)
    u = ar1_paths(spec.autocorr, spec.T + spec.burn_in, rng)[spec.burn_in:]
    z = u @ spec.image_matrix().T
    z += rng.standard_normal(z.shape) * spec.pixel_noise_std()
    return z


def consecutive_pairs(sequence: np.ndarray) -> SampleBatch:
    """Rows ``(z^t, z^{t+1})`` for t = 1..T-1."""
    seq = np.asarray(sequence, dtype=float)
    if seq.ndim != 2 or seq.shape[0] < 2:
        raise ValidationError(f"need a T x d sequence with T >= 2, got shape {seq.shape}")
    return SampleBatch(seq[:-1], seq[1:])


def temporal_theoretical_params(spec: TemporalSpec) -> list[FeatureParams]:
    """(sigma^2, lambda) along each unit image direction."""
    out = []
    for v, g, s in zip(spec.images, spec.autocorr, spec.noise_std):
        n2 = float(v @ v)
        sig = s * s + n2
        out.append(FeatureParams(g * n2, sig, sig))
    return out


def temporal_estimate(spec: TemporalSpec, seed: int) -> CovarianceEstimate:
    return empirical_covariances(consecutive_pairs(simulate_temporal(spec, seed)))


def projected_params(est: CovarianceEstimate, directions: np.ndarray) -> list[FeatureParams]:
    """Empirical (sigma^2, lambda) along the columns of ``directions``."""
    sig, lam = est.project(directions)
    return [FeatureParams(float(l), float(s)) for l, s in zip(lam, sig)]
