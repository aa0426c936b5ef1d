import numpy as np
import pytest
from hypothesis import given, strategies as st

from jepalab.core import (FeatureParams, GaussianDataSpec, SampleBatch, SamplingError, ValidationError,
                          population_covariances, regression_coefficient, sample_gaussian_pairs, validate_spec)

pos = st.floats(min_value=1e-3, max_value=1e3, allow_nan=False)


@pytest.mark.parametrize("lam,s2,expected", [(1.0, 1.0, 1.0), (1.0, 2.0, 0.5), (0.99, 2.0, 0.495)])
def test_regression_coefficient(lam, s2, expected):
    assert regression_coefficient(FeatureParams(lam, s2)) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("s2", [0.0, -1.0])
def test_regression_coefficient_rejects_nonpositive_variance(s2):
    with pytest.raises(ValidationError):
        regression_coefficient(FeatureParams(1.0, s2))


@given(lam=pos, s2=pos, c=pos)
def test_rho_is_scale_invariant(lam, s2, c):
    assert FeatureParams(c * lam, c * s2).rho == pytest.approx(FeatureParams(lam, s2).rho, rel=1e-12)


def test_y_var_defaults_to_sigma_sq():
    assert FeatureParams(0.3, 2.5).y_var == 2.5
    assert FeatureParams.from_rho(2.0, 0.5).sigma_sq == 4.0


def test_validate_clean_spec():
    spec = GaussianDataSpec.from_arrays([0.5, 1.0], [1.0, 2.0], [1.0, 1.0])
    assert validate_spec(spec, for_sampling=True) == []


def test_validate_flags_zero_variance_by_index():
    spec = GaussianDataSpec.from_arrays([1.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 1.0])
    v = validate_spec(spec)
    assert len(v) == 1 and v[0].feature == 1 and v[0].kind == "sigma_sq"


def test_validate_psd_only_when_sampling():
    spec = GaussianDataSpec([FeatureParams(2.0, 1.0, 1.0)])
    assert validate_spec(spec) == []
    (v,) = validate_spec(spec, for_sampling=True)
    assert v.kind == "psd" and "4" in v.message


def test_nonpositive_lambda_is_flagged_not_rejected():
    spec = GaussianDataSpec.from_arrays([-0.2], [1.0])
    assert [v.kind for v in validate_spec(spec)] == ["nonpositive_lambda"]
    sample_gaussian_pairs(spec, 10, 0)


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-1, 5), st.floats(-1, 5)), min_size=1, max_size=6),
       st.booleans())
def test_validate_is_idempotent(rows, flag):
    spec = GaussianDataSpec([FeatureParams(*r) for r in rows])
    assert validate_spec(spec, flag) == validate_spec(spec, flag)


def test_population_covariances():
    s, l = population_covariances(GaussianDataSpec.from_arrays([1, 2, 3], [1, 1, 1]))
    np.testing.assert_array_equal(s, [1, 1, 1])
    np.testing.assert_array_equal(l, [1, 2, 3])
    s, l = population_covariances(GaussianDataSpec.from_arrays([0.25], [1.0]))
    assert (s[0], l[0]) == (1.0, 0.25)


def test_sampler_cross_moment():
    n = 100_000
    b = sample_gaussian_pairs(GaussianDataSpec([FeatureParams(0.5, 1.0, 1.0)]), n, 11)
    assert abs(np.mean(b.x * b.y) - 0.5) < 3e-2
    b0 = sample_gaussian_pairs(GaussianDataSpec([FeatureParams(0.0, 1.0, 1.0)]), n, 12)
    assert abs(np.mean(b0.x * b0.y)) < 3e-2


def test_sampler_is_deterministic():
    spec = GaussianDataSpec.from_arrays([0.2, 0.4], [1.0, 1.0])
    a, b = sample_gaussian_pairs(spec, 50, 3), sample_gaussian_pairs(spec, 50, 3)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert sample_gaussian_pairs(spec, 50, 4).x.tobytes() != a.x.tobytes()


def test_sampler_rejects_psd_violation():
    spec = GaussianDataSpec([FeatureParams(0.1, 1.0, 1.0), FeatureParams(2.0, 1.0, 1.0)])
    with pytest.raises(SamplingError, match="feature 1"):
        sample_gaussian_pairs(spec, 10, 0)
    with pytest.raises(ValidationError):
        sample_gaussian_pairs(spec, 0, 0)


@given(st.lists(st.tuples(st.floats(0.05, 1.0), st.floats(0.5, 3.0)), min_size=1, max_size=3),
       st.integers(0, 2**32 - 1))
def test_second_moments_within_five_standard_errors(rows, seed):
    feats = [FeatureParams(l * s, s, s) for l, s in rows]  # |rho| <= 1 keeps y_var = sigma_sq feasible
    spec = GaussianDataSpec(feats)
    n = 100_000
    b = sample_gaussian_pairs(spec, n, seed)
    for i, f in enumerate(feats):
        x, y = b.x[:, i], b.y[:, i]
        for prod, target in ((x * x, f.sigma_sq), (x * y, f.lambda_), (y * y, f.y_var)):
            se = prod.std() / np.sqrt(n)
            assert abs(prod.mean() - target) < 5 * se


def test_sample_batch_is_immutable_and_checked():
    b = SampleBatch(np.zeros((2, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        b.x[0, 0] = 1.0
    with pytest.raises(ValidationError):
        SampleBatch(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ValidationError):
        SampleBatch(np.full((1, 1), np.nan), np.zeros((1, 1)))
