import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_classification, make_problem, make_regression
from feddelavg.errors import ConfigError, InvariantError, NumericalError, PreconditionError
from feddelavg.ml_core import (CrossEntropy, DataPoint, Dataset, FederatedProblem, ProblemConstants, SquaredError,
                               compute_reference_optimum, device_weights, estimate_constants, gd_step, get_loss,
                               global_loss, grad_local, loss_point, local_loss, weighted_sum)


def fd_grad(f, w, h=1e-6):
    g = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        e = np.zeros_like(w)
        e[idx] = h
        g[idx] = (f(w + e) - f(w - e)) / (2 * h)
    return g


# -- point and dataset losses --------------------------------------------------------

def test_loss_point_examples():
    se = SquaredError()
    assert loss_point(se, DataPoint(np.array([1.0, 0.0]), 0.0), np.zeros(2)) == 0.0
    assert loss_point(se, DataPoint(np.array([1.0, 0.0]), 1.0), np.zeros(2)) == 0.5
    ce = CrossEntropy()
    assert loss_point(ce, DataPoint(np.array([0.3, -2.0]), 1), np.zeros((2, 2))) == pytest.approx(math.log(2))


def test_loss_point_dimension_mismatch():
    with pytest.raises(ConfigError):
        loss_point(SquaredError(), DataPoint(np.array([1.0, 0.0]), 0.0), np.zeros(3))


def test_local_loss_mean_of_points():
    ds = Dataset(np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([1.0, 1.0]))
    assert local_loss(SquaredError(), ds, np.zeros(2)) == 0.5
    single = Dataset(np.array([[2.0, -1.0]]), np.array([0.5]))
    w = np.array([0.3, 0.2])
    assert local_loss(SquaredError(), single, w) == loss_point(SquaredError(), single.points[0], w)


@pytest.mark.parametrize("kind", ["cross_entropy", "squared_error"])
def test_local_loss_matches_per_point_sum(kind):
    ds = make_classification(17, seed=3) if kind == "cross_entropy" else make_regression(17, seed=3)
    model = get_loss(kind)
    w = np.random.default_rng(1).standard_normal(model.param_shape(ds))
    oracle = sum(loss_point(model, p, w) for p in ds.points) / len(ds)
    assert abs(local_loss(model, ds, w) - oracle) <= 1e-12


def test_empty_dataset_rejected():
    with pytest.raises(ConfigError):
        Dataset(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ConfigError):
        Dataset.from_points([])


def test_global_loss_weights():
    assert device_weights([5, 5]).tolist() == [0.5, 0.5]
    assert device_weights([30, 10]).tolist() == [0.75, 0.25]
    ds = make_regression(10)
    w = np.ones(4)
    same = global_loss([(SquaredError(), ds), (SquaredError(), ds)], [0.5, 0.5], w)
    assert same == local_loss(SquaredError(), ds, w)
    with pytest.raises(InvariantError):
        global_loss([(SquaredError(), ds), (SquaredError(), ds)], [0.5, 0.6], w)


# -- gradients -----------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["cross_entropy", "squared_error"])
@pytest.mark.parametrize("seed", range(4))
def test_gradient_matches_finite_differences(kind, seed):
    ds = make_classification(20, seed=seed) if kind == "cross_entropy" else make_regression(20, seed=seed)
    model = get_loss(kind)
    w = np.random.default_rng(seed).standard_normal(model.param_shape(ds))
    g = grad_local(model, ds, w)
    fd = fd_grad(lambda v: model.value(ds, v), w)
    assert g.shape == w.shape
    assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)


def test_gradient_zero_at_least_squares_solution():
    ds = make_regression(30, seed=2)
    w_star = np.linalg.lstsq(ds.X, ds.y, rcond=None)[0]
    assert np.linalg.norm(grad_local(SquaredError(), ds, w_star)) < 1e-12


def test_softmax_gradient_rows_sum_to_zero():
    ds = Dataset(np.array([[1.0, 2.0], [-1.0, 0.5]]), np.array([0, 1]), 2)
    g = grad_local(CrossEntropy(), ds, np.zeros((2, 2)))
    assert np.allclose(g.sum(axis=0), 0.0, atol=1e-15)


@pytest.mark.parametrize("kind", ["cross_entropy", "squared_error"])
def test_batched_evaluation_matches_single(kind):
    ds = make_classification(15, seed=5) if kind == "cross_entropy" else make_regression(15, seed=5)
    model = get_loss(kind)
    W = np.random.default_rng(0).standard_normal((6,) + model.param_shape(ds))
    assert np.allclose(model.values_batch(ds, W), [model.value(ds, w) for w in W], rtol=1e-12)
    assert np.allclose(model.grads_batch(ds, W), [model.grad(ds, w) for w in W], rtol=1e-10, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), lam=st.floats(0.01, 0.99), kind=st.sampled_from(["cross_entropy", "squared_error"]))
def test_convexity_witness(seed, lam, kind):
    ds = make_classification(12, seed=seed) if kind == "cross_entropy" else make_regression(12, seed=seed)
    model = get_loss(kind)
    rng = np.random.default_rng(seed)
    w1 = 3 * rng.standard_normal(model.param_shape(ds))
    w2 = 3 * rng.standard_normal(model.param_shape(ds))
    mid = model.value(ds, lam * w1 + (1 - lam) * w2)
    assert mid <= lam * model.value(ds, w1) + (1 - lam) * model.value(ds, w2) + 1e-10


# -- gradient steps ------------------------------------------------------------------

def test_gd_step_examples():
    w = np.array([1.5, -2.0])
    assert np.array_equal(gd_step(lambda v: np.zeros_like(v), w, 0.1), w)
    assert gd_step(lambda v: v, np.array([1.0]), 0.5)[0] == 0.5
    with pytest.raises(ConfigError):
        gd_step(lambda v: v, w, 0.0)


def test_gd_monotone_on_quadratic():
    ds = make_regression(40, seed=7)
    beta = SquaredError().curvature_bound(ds)
    w = np.full(4, 5.0)
    losses = []
    for _ in range(200):
        losses.append(SquaredError().value(ds, w))
        w = gd_step(lambda v: SquaredError().grad(ds, v), w, 1.0 / beta)
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))


# -- weights -------------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(sizes=st.lists(st.integers(1, 10_000), min_size=1, max_size=30))
def test_weight_normalization(sizes):
    rho = device_weights(sizes)
    assert abs(rho.sum() - 1.0) <= 1e-12
    assert np.allclose(rho * sum(sizes), sizes)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(-5, 5), b=st.floats(-5, 5))
def test_weighted_sum_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    rho = device_weights(rng.integers(1, 50, 4))
    P, Q = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    lhs = weighted_sum(rho, list(a * P + b * Q))
    rhs = a * weighted_sum(rho, list(P)) + b * weighted_sum(rho, list(Q))
    assert np.allclose(lhs, rhs, atol=1e-12, rtol=0)


# -- constants ------------------------------------------------------------------------

def _probes(problem, count=40, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return scale * rng.standard_normal((count,) + problem.param_shape)


def test_identical_devices_have_zero_dissimilarity():
    ds = make_classification(30, seed=1)
    # rho = 1/4 is exact in binary, so the global gradient reproduces each local one bit for bit
    problem = FederatedProblem(CrossEntropy(), (ds, ds, ds, ds))
    c = estimate_constants(problem, _probes(problem), 0.1)
    assert c.delta_i == (0.0, 0.0, 0.0, 0.0)
    assert c.delta == 0.0


def test_beta_matches_top_eigenvalue_for_least_squares():
    ds = make_regression(60, m=5, seed=4)
    problem = FederatedProblem(SquaredError(), (ds,))
    oracle = np.linalg.eigvalsh(ds.X.T @ ds.X / len(ds))[-1]
    c = estimate_constants(problem, _probes(problem, 80), 0.1)
    assert abs(c.beta - oracle) <= 0.05 * oracle
    assert c.beta <= oracle * (1 + 1e-6)


@pytest.mark.parametrize("kind", ["cross_entropy", "squared_error"])
def test_estimated_constants_properties(kind):
    problem = make_problem(kind, N=4)
    probes = _probes(problem, 50)
    c = estimate_constants(problem, probes, 0.1)
    assert all(d <= 2 * c.L for d in c.delta_i)
    assert c.delta == float(weighted_sum(problem.weights, list(c.delta_i)))
    assert c.omega is None and c.phi is None
    assert c.provenance["L"] == "estimated" and c.provenance["phi"] == "unset"
    norms = [np.linalg.norm(problem.local_grad(i, w)) for i in range(problem.N) for w in probes]
    assert max(norms) == pytest.approx(c.L, rel=1e-12)


def test_estimate_constants_needs_two_distinct_probes(ce_problem):
    with pytest.raises(ConfigError):
        estimate_constants(ce_problem, _probes(ce_problem, 1), 0.1)
    same = np.repeat(_probes(ce_problem, 1), 3, axis=0)
    with pytest.raises(ConfigError):
        estimate_constants(ce_problem, same, 0.1)


def test_constants_invariants_and_overrides():
    c = ProblemConstants(2.0, 1.0, (0.5, 1.5), (0.25, 0.75))
    assert c.delta == 0.25 * 0.5 + 0.75 * 1.5
    with pytest.raises(InvariantError):
        ProblemConstants(2.0, 1.0, (0.5, 1.5), (0.25, 0.75), delta=3.0)
    with pytest.raises(InvariantError):
        ProblemConstants(-1.0, 1.0, (0.5,), (1.0,))
    c = c.with_phi(0.5, 0.2)
    assert c.phi == 0.5 * (1 - 0.1)
    halved = c.overridden(L_scale=0.5)
    assert halved.L == 1.0 and halved.provenance["L"] == "supplied" and halved.phi == c.phi
    assert c.overridden(beta=3.0).phi is None
    assert ProblemConstants.from_dict(c.to_dict()) == c


# -- reference optimum ----------------------------------------------------------------

def test_reference_optimum_reaches_least_squares_solution():
    ds = make_regression(50, seed=9)
    problem = FederatedProblem(SquaredError(), (ds,))
    beta = problem.smoothness_upper_bound()
    ref = compute_reference_optimum(problem, np.zeros(4), 1.0 / beta, 5000, beta=beta)
    oracle = np.linalg.lstsq(ds.X, ds.y, rcond=None)[0]
    assert ref.certified and ref.grad_norm < 1e-8
    assert np.allclose(ref.params, oracle, atol=1e-8)
    assert ref.loss <= problem.global_loss(np.zeros(4))


def test_reference_optimum_fixed_point():
    ds = make_regression(50, seed=9)
    problem = FederatedProblem(SquaredError(), (ds,))
    oracle = np.linalg.lstsq(ds.X, ds.y, rcond=None)[0]
    ref = compute_reference_optimum(problem, oracle, 0.1, 100)
    assert np.max(np.abs(ref.params - oracle)) <= 1e-12


def test_reference_optimum_errors():
    ds = make_regression(50, seed=9)
    problem = FederatedProblem(SquaredError(), (ds,))
    beta = problem.smoothness_upper_bound()
    with pytest.raises(PreconditionError, match="eta < 2/beta"):
        compute_reference_optimum(problem, np.zeros(4), 2.5 / beta, 10, beta=beta)
    with pytest.raises(NumericalError, match="eta < 2/beta"):
        compute_reference_optimum(problem, np.ones(4), 3.0 / beta, 500)
