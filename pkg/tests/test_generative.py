import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jepalab.core import GaussianDataSpec, SampleBatch, ValidationError, sample_gaussian_pairs, \
    make_rng, validate_spec
from jepalab.deep_linear import haar_orthogonal
from jepalab.generative import (CovarianceAccumulator, CovarianceEstimate, MaskingSpec, TemporalSpec, ar1_paths,
                                below_average_factors, block_images, consecutive_pairs, diagonalizability_error,
                                empirical_covariances, fig3_temporal_spec, masking_covariances,
                                masking_theoretical_params, projected_params, sample_masked_views,
                                simulate_temporal, temporal_estimate, temporal_theoretical_params)
from jepalab.ode import OdeProblem, integrate



def _masking(d=4, f=0.5, cv=None, noise=0.5, seed=0, basis="haar"):
    cv = np.ones(d) if cv is None else np.asarray(cv, dtype=float)
    return MaskingSpec(d, f, cv, noise, seed, basis)


def test_masking_params_example():
    # mean coefficient variance 1 with one factor at 2
    spec = _masking(cv=[2.0, 1.0, 0.5, 0.5])
    p = masking_theoretical_params(spec)[0]
    assert p.sigma_sq == pytest.approx(1.0, rel=1e-14)
    assert p.lambda_ == pytest.approx(0.25, rel=1e-14)
    assert p.rho == pytest.approx(0.25, rel=1e-14)
    f, s2, mean, eta = 0.5, 2.0, 1.0, 0.5
    assert p.rho == pytest.approx((1 - f) * (s2 - mean) / (mean + eta + f * (s2 - mean)), rel=1e-14)


@given(f=st.floats(0.05, 0.95), cv=st.lists(st.floats(0.0, 10.0), min_size=2, max_size=12),
       noise=st.floats(0.0, 3.0))
def test_masking_rho_expressions_agree(f, cv, noise):
    spec = _masking(len(cv), f, cv, noise)
    mean = spec.mean_coeff_var
    for p, s2 in zip(masking_theoretical_params(spec), spec.coeff_vars):
        if p.sigma_sq == 0:
            continue
        other = (1 - f) * (s2 - mean) / (mean + noise + f * (s2 - mean))
        assert p.rho == pytest.approx(other, rel=1e-9, abs=1e-12)


def test_masking_flags_below_average_factors():
    spec = _masking(cv=[3.0, 1.0, 0.0, 0.0])
    params = masking_theoretical_params(spec)
    assert params[1].lambda_ == 0.0 and params[1].rho == 0.0
    assert params[2].lambda_ < 0
    assert below_average_factors(spec).tolist() == [1, 2, 3]
    gs = GaussianDataSpec(params)
    assert {v.feature for v in validate_spec(gs)} >= {1, 2, 3}


def test_masking_lambda_vanishes_as_f_tends_to_one():
    lam = [abs(masking_theoretical_params(_masking(f=f, cv=[4, 0, 0, 0]))[0].lambda_) for f in (0.9, 0.99, 0.999)]
    assert lam[0] > lam[1] > lam[2] and lam[2] < 3e-3


@pytest.mark.parametrize("bad", [dict(f=0.0), dict(f=1.0), dict(noise=-1.0), dict(cv=[1, -1, 1, 1]),
                                 dict(cv=[1, 1]), dict(basis="sparse")])
def test_masking_spec_validation(bad):
    with pytest.raises(ValidationError):
        _masking(**bad)


def test_masked_views_are_complementary():
    spec = _masking(d=16, f=0.3, cv=np.linspace(0, 3, 16))
    b = sample_masked_views(spec, 5000, 1, chunk=777)
    assert np.all(b.x * b.y == 0)
    kept = np.mean(b.x != 0)
    se = math.sqrt(0.3 * 0.7 / b.x.size)
    assert abs(kept - 0.3) < 5 * se


def test_masked_streaming_matches_materialised():
    spec = _masking(d=8, cv=np.arange(8.0))
    b = sample_masked_views(spec, 3000, 4, chunk=512)
    stream = masking_covariances(spec, 3000, 4, chunk=512)
    ref = empirical_covariances(b)
    np.testing.assert_allclose(stream.sxx, ref.sxx, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(stream.sxy, ref.sxy, rtol=1e-12, atol=1e-14)
    again = masking_covariances(spec, 3000, 4, chunk=512)
    assert again.sxx.tobytes() == stream.sxx.tobytes()


def test_gaussian_basis_is_roughly_orthonormal():
    b = _masking(d=400, basis="gaussian").basis_matrix()
    assert np.max(np.abs(np.linalg.norm(b, axis=0) - 1)) < 0.25
    h = _masking(d=50).basis_matrix()
    np.testing.assert_allclose(h.T @ h, np.eye(50), atol=1e-12)


@pytest.mark.slow
@pytest.mark.parametrize("f", [0.25, 0.5, 0.75])
def test_masking_theorem_at_scale(f):
    d, n = 512, 200_000
    cv = np.zeros(d)
    cv[:16] = [(2 + 6 * k / 15) * 32 for k in range(16)]
    spec = MaskingSpec(d, f, cv, 1.0, 7)
    est = masking_covariances(spec, n, 0)
    emp = projected_params(est, spec.basis_matrix()[:, :16])
    for e, t in zip(emp, masking_theoretical_params(spec)[:16]):
        assert e.sigma_sq == pytest.approx(t.sigma_sq, rel=0.05)
        assert e.lambda_ == pytest.approx(t.lambda_, rel=0.05)


def test_temporal_params_examples():
    spec = fig3_temporal_spec(T=10)
    p1, p2 = temporal_theoretical_params(spec)
    assert (p1.lambda_, p1.sigma_sq) == pytest.approx((0.99, 2.0), rel=1e-14)
    assert p1.rho == pytest.approx(0.495, rel=1e-14)
    assert p2.rho == pytest.approx(0.95 / 1.25, rel=1e-14)
    assert p1.lambda_ > p2.lambda_ and p1.rho < p2.rho
    clean = TemporalSpec(block_images([3]), [0.7], [0.0], 10)
    assert temporal_theoretical_params(clean)[0].rho == pytest.approx(0.7, rel=1e-14)


@pytest.mark.parametrize("kw", [dict(autocorr=[1.0, 0.5]), dict(autocorr=[0.0, 0.5]), dict(noise_std=[-1, 1]),
                                dict(T=1), dict(autocorr=[0.5])])
def test_temporal_spec_validation(kw):
    args = dict(images=block_images([2, 2]), autocorr=[0.9, 0.5], noise_std=[1.0, 1.0], T=10)
    args.update(kw)
    with pytest.raises(ValidationError):
        TemporalSpec(**args)


def test_temporal_rejects_overlapping_supports():
    v = np.ones(4)
    with pytest.raises(ValidationError, match="disjoint"):
        TemporalSpec((v, v), [0.5, 0.5], [1, 1], 10)


def test_default_burn_in():
    assert fig3_temporal_spec(T=10).burn_in == 1000


def test_ar1_moments():
    T = 400_000
    u = ar1_paths(np.array([0.9, 0.3, 1e-9]), T, make_rng(3))
    var_se = math.sqrt(2.0 * (1 + 0.81) / (1 - 0.81) / T)
    assert abs(u[:, 0].var() - 1) < 5 * var_se
    for a, g in enumerate([0.9, 0.3, 0.0]):
        r = np.mean(u[:-1, a] * u[1:, a]) / np.mean(u[:, a] ** 2)
        assert abs(r - g) < 3 * math.sqrt((1 + g * g) / T) + 3 / math.sqrt(T)


def test_simulation_shape_and_determinism():
    spec = fig3_temporal_spec(T=500, block=4)
    z = simulate_temporal(spec, 1)
    assert z.shape == (500, 8)
    assert simulate_temporal(spec, 1).tobytes() == z.tobytes()
    assert not np.array_equal(simulate_temporal(spec, 2), z)


def test_noise_lives_on_image_blocks_only():
    imgs = (np.array([1.0, 0.0, 0.0]),)
    z = simulate_temporal(TemporalSpec(imgs, [0.5], [2.0], 50), 0)
    assert np.all(z[:, 1:] == 0)


def test_consecutive_pairs():
    seq = np.arange(6.0).reshape(3, 2)
    b = consecutive_pairs(seq)
    assert b.n == 2 and np.array_equal(b.x[1], seq[1]) and np.array_equal(b.y[1], seq[2])
    assert consecutive_pairs(seq[:2]).n == 1
    const = consecutive_pairs(np.ones((5, 3)))
    assert np.array_equal(const.x, const.y)
    with pytest.raises(ValidationError):
        consecutive_pairs(seq[:1])


def test_empirical_covariance_examples():
    e = np.zeros((4, 3))
    e[:, 0] = 1
    est = empirical_covariances(SampleBatch(e, e))
    np.testing.assert_array_equal(est.sxx, np.diag([1.0, 0, 0]))
    np.testing.assert_array_equal(est.sxy, np.diag([1.0, 0, 0]))
    rng = make_rng(0)
    x, y = rng.standard_normal((50, 3)), rng.standard_normal((50, 3))
    np.testing.assert_allclose(empirical_covariances(SampleBatch(y, x)).sxy,
                               empirical_covariances(SampleBatch(x, y)).sxy.T, rtol=1e-13)
    perm = rng.permutation(50)
    np.testing.assert_allclose(empirical_covariances(SampleBatch(x[perm], y[perm])).sxy,
                               empirical_covariances(SampleBatch(x, y)).sxy, rtol=1e-12)


def test_empirical_covariance_of_gaussian_spec():
    spec = GaussianDataSpec.from_arrays([0.5, 1.0, 0.2], [1.0, 2.0, 0.5])
    n = 1_000_000
    est = empirical_covariances(sample_gaussian_pairs(spec, n, 11))
    for i, p in enumerate(spec.features):
        assert abs(est.sxx[i, i] - p.sigma_sq) < 5 * p.sigma_sq * math.sqrt(2.0 / n)
        se = math.sqrt((p.sigma_sq * p.y_var + p.lambda_ ** 2) / n)
        assert abs(est.sxy[i, i] - p.lambda_) < 5 * se


def test_accumulator_merge_equals_single_pass():
    rng = make_rng(5)
    x, y = rng.standard_normal((300, 4)), rng.standard_normal((300, 4))
    whole = CovarianceAccumulator(4).add(x, y).estimate()
    parts = CovarianceAccumulator(4).add(x[:100], y[:100]).merge(CovarianceAccumulator(4).add(x[100:], y[100:]))
    np.testing.assert_allclose(parts.estimate().sxy, whole.sxy, rtol=1e-12)
    assert parts.n == 300
    with pytest.raises(ValidationError):
        CovarianceAccumulator(3).add(x, y)


def test_covariance_estimate_validation():
    with pytest.raises(ValidationError):
        CovarianceEstimate(np.eye(2), np.eye(2), 1)
    with pytest.raises(ValidationError):
        CovarianceEstimate(np.array([[1.0, 2.0], [0.0, 1.0]]), np.eye(2), 5)


def test_diagonalizability_examples():
    assert diagonalizability_error(CovarianceEstimate(np.diag([1.0, 2.0, 3.0]), np.diag([3.0, 1.0, 2.0]), 10)) == 0.0
    swap = CovarianceEstimate(np.eye(2), np.array([[0.0, 1.0], [1.0, 0.0]]), 10)
    assert diagonalizability_error(swap, "raw") == pytest.approx(1.0)
    # the secondary rotation diagonalises the symmetric swap matrix itself
    assert diagonalizability_error(swap) == pytest.approx(0.0, abs=1e-30)
    assert diagonalizability_error(CovarianceEstimate([[2.0]], [[5.0]], 3)) == 0.0
    with pytest.raises(ValidationError):
        diagonalizability_error(swap, "other")


@settings(max_examples=25)
@given(seed=st.integers(0, 2**31), d=st.integers(2, 6))
def test_diagonalizability_invariant_under_conjugation(seed, d):
    rng = make_rng(seed)
    q = haar_orthogonal(d, rng)
    sxx = q @ np.diag(np.arange(1.0, d + 1)) @ q.T
    sxy = rng.standard_normal((d, d))
    r = haar_orthogonal(d, rng)
    a = diagonalizability_error(CovarianceEstimate(0.5 * (sxx + sxx.T), sxy, 10))
    moved = r @ sxx @ r.T
    b = diagonalizability_error(CovarianceEstimate(0.5 * (moved + moved.T), r @ sxy @ r.T, 10))
    assert b == pytest.approx(a, rel=1e-8, abs=1e-14)


def test_temporal_estimates_within_two_sd():
    spec = fig3_temporal_spec(T=100_000, block=4)
    dirs = spec.image_matrix()
    runs = np.array([[(p.lambda_, p.rho) for p in projected_params(temporal_estimate(spec, s), dirs)]
                     for s in range(10)])
    theory = np.array([(p.lambda_, p.rho) for p in temporal_theoretical_params(spec)])
    mean, sd = runs.mean(axis=0), runs.std(axis=0, ddof=1)
    assert np.all(np.abs(mean - theory) <= 2 * sd)


def test_diagonalizability_improves_with_length():
    spec = fig3_temporal_spec(block=4)
    means = [np.mean([diagonalizability_error(temporal_estimate(spec.with_length(T), s)) for s in range(5)])
             for T in (1_000, 10_000, 100_000)]
    assert means[0] > means[1] > means[2]


def test_temporal_params_feed_the_ode():
    spec = fig3_temporal_spec(T=10)
    gs = GaussianDataSpec(temporal_theoretical_params(spec))
    assert validate_spec(gs) == []
    for p in gs.features:
        for obj in ("jepa", "mae"):
            res = integrate(OdeProblem(obj, 2, p.lambda_, p.rho, 0.05))
            assert res.converged
