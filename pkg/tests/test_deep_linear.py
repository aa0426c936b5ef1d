import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jepalab.closed_form import mae_l1_solution
from jepalab.core import GaussianDataSpec, SampleBatch, ValidationError, make_rng, sample_gaussian_pairs
from jepalab.deep_linear import (DeepLinearModel, Population, Sampled, TrainTrace, analytic_gradients,
                                 balancedness_error, feature_projections, haar_orthogonal, init_gaussian,
                                 init_structured, learning_order, loss, population_loss, train,
                                 train_with_fallback)
from jepalab.ode import DivergenceError, OdeProblem, fixed_point, integrate


def _random_model(d, L, objective, seed, scale=0.7):
    return init_gaussian(d, L, scale, seed, objective)


@settings(max_examples=20)
@given(d=st.integers(1, 8), L=st.integers(1, 5), eps=st.floats(1e-4, 0.9), seed=st.integers(0, 2**31),
       obj=st.sampled_from(["jepa", "mae"]))
def test_structured_init(d, L, eps, seed, obj):
    m = init_structured(d, L, eps, obj, seed)
    for w in m.layers:
        assert np.linalg.norm(w.T @ w - eps ** (2 / L) * np.eye(d)) <= 1e-10 * d
    assert balancedness_error(m) <= 1e-10
    np.testing.assert_allclose(feature_projections(m), eps, rtol=1e-10)
    prod = m.decoder @ m.encoder() if obj == "mae" else m.decoder
    assert np.allclose(prod, np.diag(np.diag(prod)), atol=1e-12)


def test_gaussian_init_moments():
    d, scale = 100, 1.3
    m = init_gaussian(d, 3, scale, 5)
    entries = np.concatenate([w.ravel() for w in m.layers])
    se = math.sqrt(2.0 / entries.size) * scale ** 2 / d
    assert abs(entries.var() - scale ** 2 / d) < 5 * se
    again = init_gaussian(d, 3, scale, 5)
    assert all(np.array_equal(a, b) for a, b in zip(m.layers, again.layers))


def test_zero_scale_stays_at_zero():
    m = init_gaussian(4, 2, 0.0, 1)
    trace = train(m, Population(np.ones(4), np.ones(4)), 1e-2, 50)
    assert np.all(trace.projections == 0)


def test_losses_simple_cases():
    rng = make_rng(0)
    x, y = rng.standard_normal((500, 3)), rng.standard_normal((500, 3))
    zero = DeepLinearModel([np.eye(3)], np.zeros((3, 3)), "mae")
    assert loss(zero, SampleBatch(x, y)) == pytest.approx(0.5 * np.mean(np.sum(y ** 2, axis=1)), rel=1e-14)
    jepa = DeepLinearModel([rng.standard_normal((3, 3)), rng.standard_normal((3, 3))], np.eye(3), "jepa")
    assert loss(jepa, SampleBatch(x, x)) == pytest.approx(0.0, abs=1e-20)


def test_loss_at_regression_optimum():
    lam, s2, yv = 0.6, 1.5, 0.9
    spec = GaussianDataSpec.from_arrays([lam], [s2], [yv])
    m = DeepLinearModel([np.array([[1.0]])], np.array([[lam / s2]]), "mae")
    expected = 0.5 * (yv - lam ** 2 / s2)
    assert population_loss(m, [s2], [lam], [yv]) == pytest.approx(expected, rel=1e-14)
    n = 400_000
    b = sample_gaussian_pairs(spec, n, 3)
    assert loss(m, b) == pytest.approx(expected, abs=5 * expected * math.sqrt(2.0 / n))


def test_mae_decoder_gradient_vanishes_at_optimum():
    s2, lam = np.array([1.0, 2.0, 0.5]), np.array([0.3, 0.8, 0.2])
    rng = make_rng(4)
    layers = [rng.standard_normal((3, 3)) for _ in range(2)]
    m = DeepLinearModel(layers, np.zeros((3, 3)), "mae")
    m.decoder = np.diag(lam / s2) @ np.linalg.inv(m.encoder())
    assert np.max(np.abs(analytic_gradients(m, s2, lam).decoder)) < 1e-12


def test_gradients_vanish_at_zero_model():
    m = DeepLinearModel([np.zeros((3, 3))] * 3, np.zeros((3, 3)), "jepa")
    assert analytic_gradients(m, np.ones(3), np.ones(3)).norm() == 0.0


def _fd_direction(f, model, direction, h=1e-5):
    plus, minus = model.copy(), model.copy()
    for mp, mm, dd in zip(plus.layers + [plus.decoder], minus.layers + [minus.decoder], direction):
        mp += h * dd
        mm -= h * dd
    return (f(plus) - f(minus)) / (2 * h)


def _dot(g, direction):
    return sum(np.sum(a * b) for a, b in zip(g.layers + [g.decoder], direction))


@pytest.mark.parametrize("L", [1, 2, 4])
def test_mae_gradient_matches_finite_differences(L):
    d = 3
    sxx = np.diag([1.0, 2.0, 0.7])
    syx = make_rng(9).standard_normal((d, d)) * 0.4
    m = _random_model(d, L, "mae", 2)
    rng = make_rng(10)
    for _ in range(3):
        direction = [rng.standard_normal((d, d)) for _ in range(L + 1)]
        fd = _fd_direction(lambda mm: population_loss(mm, sxx, syx, np.eye(d)), m, direction)
        g = analytic_gradients(m, sxx, syx)
        scale = g.norm() * math.sqrt(sum(np.sum(x ** 2) for x in direction))
        assert _dot(g, direction) == pytest.approx(fd, abs=1e-7 * scale)


@pytest.mark.parametrize("L", [1, 3])
def test_jepa_gradient_is_stopgrad_surrogate(L):
    # with the target encoder frozen, the loss is 1/2 E||V Wbar x - C y||^2
    d = 3
    sxx = np.diag([1.0, 1.5, 0.6])
    syx = np.diag([0.5, 0.9, 0.2])
    m = _random_model(d, L, "jepa", 6)
    frozen = m.encoder().copy()

    def surrogate(mm):
        a = mm.decoder @ mm.encoder()
        return 0.5 * (np.trace(a @ sxx @ a.T) - 2 * np.trace(a @ syx.T @ frozen.T))

    rng = make_rng(7)
    for _ in range(3):
        direction = [rng.standard_normal((d, d)) for _ in range(L + 1)]
        fd = _fd_direction(surrogate, m, direction)
        assert _dot(analytic_gradients(m, sxx, syx), direction) == pytest.approx(fd, rel=1e-6)


def test_gradient_against_monte_carlo_loss():
    d, L, n = 2, 2, 1_000_000
    spec = GaussianDataSpec.from_arrays([0.5, 0.3], [1.0, 0.8], [1.0, 1.0])
    b = sample_gaussian_pairs(spec, n, 21)
    m = _random_model(d, L, "mae", 8)
    direction = [make_rng(1).standard_normal((d, d)) for _ in range(L + 1)]
    fd = _fd_direction(lambda mm: loss(mm, b), m, direction)
    sxx, syx = b.x.T @ b.x / n, b.y.T @ b.x / n
    assert _dot(analytic_gradients(m, sxx, syx), direction) == pytest.approx(fd, rel=1e-3)


def test_population_training_matches_l1_closed_form():
    lr = 1e-3
    m = init_structured(1, 1, 0.05, "mae", 0)
    trace = train(m, Population([1.0], [1.0]), lr, 12_000, record_every=10)
    exact = mae_l1_solution(trace.ode_times, 1.0, 1.0, 0.05)
    assert np.max(np.abs(trace.projections[:, 0] - exact)) <= 1e-2


def test_large_lr_diverges():
    with pytest.raises(DivergenceError, match="step"):
        train(init_structured(1, 1, 0.05, "mae", 0), Population([1.0], [1.0]), 1e3, 100)


def test_fallback_halves_until_stable():
    calls = []

    def make():
        calls.append(1)
        return init_structured(1, 2, 0.5, "mae", 0)

    trace, lr = train_with_fallback(make, Population([1.0], [1.0]), 4.0, 200, max_halvings=6)
    assert lr < 4.0 and len(calls) >= 2 and np.all(np.isfinite(trace.projections))
    with pytest.raises(DivergenceError):
        train_with_fallback(make, Population([1.0], [1.0]), 1e4, 200, max_halvings=1)


def test_zero_steps_records_initial_state():
    m = init_structured(3, 2, 0.1, "jepa", 1)
    trace = train(m, Population(np.ones(3), np.ones(3)), 1e-2, 0)
    assert trace.projections.shape == (1, 3) and trace.step_times.tolist() == [0.0]


def test_training_validates_inputs():
    m = init_structured(2, 2, 0.1, "mae", 1)
    with pytest.raises(ValidationError):
        train(m, Population(np.ones(2), np.ones(2)), 0.0, 5)
    with pytest.raises(ValidationError):
        train(m, Sampled(GaussianDataSpec.from_arrays([1.0], [1.0]), 10, 0), 1e-2, 5)


def test_sgd_is_seeded():
    spec = GaussianDataSpec.from_arrays([0.5, 0.4], [1.0, 1.0])
    a = train(init_structured(2, 2, 0.1, "mae", 1), Sampled(spec, 64, 3), 1e-2, 30)
    b = train(init_structured(2, 2, 0.1, "mae", 1), Sampled(spec, 64, 3), 1e-2, 30)
    assert a.projections.tobytes() == b.projections.tobytes()


def test_feature_projections_examples():
    m = DeepLinearModel([np.diag([1.0, 2.0, 3.0]), np.eye(3)], np.eye(3), "mae")
    np.testing.assert_allclose(feature_projections(m), [1, 2, 3])
    r = _random_model(5, 4, "mae", 3)
    naive = np.eye(5)
    for w in r.layers:
        naive = w @ naive
    np.testing.assert_allclose(feature_projections(r), np.sqrt((naive ** 2).sum(axis=0)), rtol=1e-12)


@settings(max_examples=20)
@given(seed=st.integers(0, 2**31), L=st.integers(1, 5), d=st.integers(1, 6))
def test_projection_invariance_under_conjugation(seed, L, d):
    rng = make_rng(seed)
    m = _random_model(d, L, "mae", seed)
    rs = [np.eye(d)] + [haar_orthogonal(d, rng) for _ in range(L - 1)] + [haar_orthogonal(d, rng)]
    layers = [rs[a + 1].T @ m.layers[a] @ rs[a] for a in range(L)]
    moved = DeepLinearModel(layers, m.decoder, "mae")
    np.testing.assert_allclose(feature_projections(moved), feature_projections(m), rtol=1e-10, atol=1e-14)


def test_balancedness_hand_example():
    m = DeepLinearModel([np.eye(2), 2 * np.eye(2)], np.eye(2), "mae")
    assert balancedness_error(m) == pytest.approx(3 * math.sqrt(2), rel=1e-15)
    single = DeepLinearModel([np.eye(2)], np.eye(2), "mae")
    assert balancedness_error(single) == 0.0


def test_structured_training_stays_balanced():
    m = init_structured(3, 3, 0.2, "mae", 4)
    trace = train(m, Population([1.0, 0.7, 1.3], [1.0, 0.63, 1.04]), 1e-3, 3000, record_every=100)
    assert np.max(trace.balancedness) <= 1e-10


def test_unaligned_balanced_drift_is_first_order():
    errs = []
    for lr in (4e-3, 2e-3):
        m = init_structured(3, 3, 0.3, "mae", 2, aligned=False)
        assert balancedness_error(m) <= 1e-10
        t = train(m, Population(np.array([3.0, 2.1, 3.9]), np.array([3.0, 1.89, 3.12])), lr, int(10.0 / lr),
                  record_every=10_000)
        errs.append(t.balancedness[-1])
    assert 1.6 <= errs[0] / errs[1] <= 2.4


@pytest.mark.parametrize("L", [1, 2, 5])
def test_network_follows_ode(L):
    lam = np.array([1.0, 0.7, 1.3])
    rho = np.array([1.0, 0.9, 0.8])
    eps, lr = 0.05, 1e-3
    steps = int(12.0 / (L * lr)) if L > 1 else 20_000
    trace = train(init_structured(3, L, eps, "mae", 1), Population(lam / rho, lam), lr, steps, record_every=20)
    for i in range(3):
        ode = integrate(OdeProblem("mae", L, lam[i], rho[i], eps), t_eval=trace.ode_times)
        assert np.max(np.abs(trace.projections[:, i] - ode.values)) <= 1e-2 * fixed_point("mae", rho[i], L)


@pytest.mark.parametrize("obj", ["jepa", "mae"])
@pytest.mark.parametrize("L", [1, 2, 5])
def test_long_training_reaches_fixed_points(obj, L):
    rho = np.array([0.5, 1.0, 1.5])
    fp = np.array([fixed_point(obj, r, L) for r in rho])
    # lambda chosen so every feature relaxes at unit rate in step time
    if obj == "jepa":
        lam = 1.0 / rho ** (2 * L - 1)
    else:
        lam = 1.0 / ((L + 1) * fp ** ((L - 1) / L))
    c = np.diag((0.5 * fp) ** (1.0 / L))
    m = DeepLinearModel([c.copy() for _ in range(L)], c.copy(), obj)
    trace = train(m, Population(lam / rho, lam), 0.01, 4000, record_every=4000)
    np.testing.assert_allclose(trace.projections[-1], fp, rtol=1e-2)


def _trace(proj, t=None):
    proj = np.asarray(proj, dtype=float)
    t = np.arange(len(proj), dtype=float) if t is None else t
    return TrainTrace(t, proj, np.zeros(len(proj)), np.zeros(len(proj)))


def test_learning_order_basics():
    proj = np.array([[0.0, 0.0, 0.0], [0.2, 0.6, 0.0], [0.9, 1.0, 0.1], [1.0, 1.0, 0.2]])
    lo = learning_order(_trace(proj), 0.5, final=[1.0, 1.0, 1.0])
    assert lo.order == [1, 0, 2] and lo.learned.tolist() == [True, True, False]
    assert lo.crossing_times[0] == pytest.approx(1 + 0.3 / 0.7)
    assert learning_order(_trace(proj[:, :1])).order == [0]
    sub = learning_order(_trace(proj), 0.5, final=[1.0, 1.0, 1.0], features=[2, 0])
    assert sub.order == [0, 2]
