import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zoforge.estimators import (EstimatorConfig, GradRecord, NonFiniteLossError, OnePointEstimator, ScaleVector,
                                compute_scale_vector, expectation_modified_spsa, materialize, n_spsa,
                                one_point_projected_grad, probe_seeds, spsa_projected_grad, variance_modified_spsa,
                                zo_group_grad_norm)
from zoforge.objectives import Objective, Quadratic
from zoforge.paramspace import ParamStore, direction_vector
from zoforge.randcore import NoiseStream, derive_step_seed, probe_seed, sample_sphere
from zoforge.theorylab import _mean_estimate, check_norm_ratio, estimator_sampler

PLUS_ONE_SEED = 7  # the 1-D sphere direction of this seed is +1


class Cubic(Objective):
    def loss(self, store, batch):
        return float(np.sum(store.values ** 3) / 6.0)


class Exploding(Objective):
    def __init__(self, bad_call):
        super().__init__()
        self.bad_call = bad_call

    def loss(self, store, batch):
        return math.nan if self.evals == self.bad_call else 1.0  # evals is 1-based here


def test_plus_one_seed():
    assert sample_sphere(PLUS_ONE_SEED, 1)[0] == pytest.approx(1.0, abs=1e-15)


def test_hand_case_scalar_quadratic():
    q = Quadratic([1.0])
    s = q.store_from([2.0])
    pg = spsa_projected_grad(s, q, None, 0.1, PLUS_ONE_SEED, z_dist="sphere")
    assert pg == pytest.approx((2.205 - 1.805) / 0.2, abs=1e-12)
    assert pg == pytest.approx(2.0, abs=1e-12)


def test_even_loss_at_origin():
    q = Quadratic([1.0, 3.0, 0.5])
    s = q.store_from(np.zeros(3))
    for seed in range(20):
        assert spsa_projected_grad(s, q, None, 0.37, seed) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**64 - 1), st.floats(1e-4, 10.0), st.sampled_from(["gaussian", "sphere"]))
def test_quadratic_exactness(seed, eps, z_dist):
    q = Quadratic(np.linspace(0.2, 2.0, 7), shift=np.arange(7.0))
    s = q.init_store(seed=3)
    z = direction_vector(s, seed, None, z_dist)
    expected = float(z @ q.grad(s))
    pg = spsa_projected_grad(s, q, None, eps, seed, z_dist=z_dist)
    assert pg == pytest.approx(expected, rel=1e-8, abs=1e-8 * (1 + eps * eps))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**64 - 1), st.floats(1e-6, 1.0), st.lists(st.floats(-5, 5), min_size=1, max_size=12))
def test_restoration_property(seed, eps, theta):
    q = Quadratic(np.ones(len(theta)))
    s = q.store_from(theta)
    before = s.values.copy()
    spsa_projected_grad(s, q, None, eps, seed)
    assert np.max(np.abs(s.values - before)) <= 1e-12
    OnePointEstimator()(s, q, None, eps, seed)
    assert np.max(np.abs(s.values - before)) <= 1e-12


def test_evaluation_budget():
    q = Quadratic([1.0, 2.0])
    s = q.init_store()
    spsa_projected_grad(s, q, None, 1e-3, 1)
    assert q.evals == 2
    op = OnePointEstimator()
    op(s, q, None, 1e-3, 1)
    op(s, q, None, 1e-3, 2)
    assert q.evals == 4
    n_spsa(s, q, None, EstimatorConfig(n=3), 5)
    assert q.evals == 10


@pytest.mark.parametrize("bad_call,which", [(1, "plus"), (2, "minus")])
def test_non_finite_loss_reports_and_restores(bad_call, which):
    obj = Exploding(bad_call)
    s = ParamStore.from_arrays({"x": [1.0, -2.0]})
    before = s.values.copy()
    with pytest.raises(NonFiniteLossError) as info:
        spsa_projected_grad(s, obj, None, 0.1, 3)
    assert info.value.which == which
    assert np.max(np.abs(s.values - before)) <= 1e-12


def test_n_spsa_step_attached_to_error():
    with pytest.raises(NonFiniteLossError) as info:
        n_spsa(ParamStore.from_arrays({"x": [1.0]}), Exploding(1), None, EstimatorConfig(), 1, step=17)
    assert info.value.step == 17


def test_n_spsa_single_probe_is_spsa():
    q = Quadratic([1.0, 2.0, 3.0])
    s = q.init_store(seed=4)
    rec = n_spsa(s, q, None, EstimatorConfig(n=1, epsilon=1e-2), 99)
    assert rec.seeds == (99,)
    assert rec.projected_grads[0] == spsa_projected_grad(s, q, None, 1e-2, 99)


def test_n_spsa_seeds_derived():
    q = Quadratic([1.0, 2.0])
    rec = n_spsa(q.init_store(), q, None, EstimatorConfig(n=4), 1234, step=3)
    assert rec.seeds == probe_seeds(1234, 4)
    assert rec.seeds[2] == derive_step_seed(1234, 2, 0) == probe_seed(1234, 2)
    assert rec.step == 3 and rec.n == 4


def test_materialize_averages_probes():
    q = Quadratic([1.0, 2.0, 3.0])
    s = q.init_store(seed=1)
    rec = n_spsa(s, q, None, EstimatorConfig(n=2), 8)
    z = [direction_vector(s, sd) for sd in rec.seeds]
    expected = (rec.projected_grads[0] * z[0] + rec.projected_grads[1] * z[1]) / 2
    assert np.allclose(materialize(s, rec), expected, rtol=1e-14)


def test_grad_record_validation_and_equality():
    with pytest.raises(ValueError):
        GradRecord(0, (1, 2), [1.0], 1e-3)
    a = GradRecord(0, (1,), [2.0], 1e-3, np.array([[1.0, 2.0]]))
    b = GradRecord(0, (1,), [2.0], 1e-3)
    assert a == b
    assert a != GradRecord(0, (1,), [2.5], 1e-3)


def test_config_validation():
    with pytest.raises(ValueError):
        EstimatorConfig(n=0)
    with pytest.raises(ValueError):
        EstimatorConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        EstimatorConfig(kind="three_point")
    with pytest.raises(ValueError):
        EstimatorConfig(kind="one_point", n=2)
    with pytest.raises(ValueError):
        EstimatorConfig(scale_source="external")


# --- one-point ---------------------------------------------------------------------


def test_one_point_hand_case():
    q = Quadratic([1.0])
    op = OnePointEstimator()
    first = one_point_projected_grad(op, q.store_from([1.2]), q, None, 0.1, PLUS_ONE_SEED, z_dist="sphere")
    assert first == 0.0
    assert op.prev_loss == pytest.approx(0.845, abs=1e-12)
    pg = one_point_projected_grad(op, q.store_from([1.0]), q, None, 0.1, PLUS_ONE_SEED, z_dist="sphere")
    assert pg == pytest.approx((0.605 - 0.845) / 0.1, abs=1e-10)
    assert pg == pytest.approx(-2.4, abs=1e-10)


def test_one_point_identical_states():
    q = Quadratic([1.0, 2.0])
    s = q.init_store(seed=2)
    op = OnePointEstimator()
    op(s, q, None, 0.1, 5)
    assert op(s, q, None, 0.1, 5) == 0.0
    op.reset()
    assert op.prev_loss is None


# --- scaled estimators -------------------------------------------------------------


def test_scale_vector_rejects_nonpositive():
    with pytest.raises(ValueError):
        ScaleVector({"a": 0.0})
    with pytest.raises(ValueError):
        ScaleVector({"a": -1.0})
    with pytest.raises(ValueError):
        ScaleVector({"a": math.inf})


def test_ones_scale_reduces_to_spsa():
    q = Quadratic(np.arange(1.0, 6.0))
    s = q.init_store(seed=1, group_sizes=(2, 3))
    ones = ScaleVector.ones(s)
    for seed in range(10):
        plain = spsa_projected_grad(s.copy(), q, None, 1e-3, seed)
        assert variance_modified_spsa(s.copy(), q, None, 1e-3, seed, ones) == plain
        assert expectation_modified_spsa(s.copy(), q, None, 1e-3, seed, ones) == plain


def test_variance_modified_scalar_cancels():
    q = Quadratic([1.0])
    s = q.store_from([2.0])
    d = ScaleVector({"theta": 2.0})
    pg = variance_modified_spsa(s, q, None, 1e-4, PLUS_ONE_SEED, d, z_dist="sphere")
    assert pg == pytest.approx(1.0, abs=1e-10)
    assert pg * 2.0 * 1.0 == pytest.approx(2.0, abs=1e-10)


def test_expectation_modified_scales_inversely():
    q = Quadratic(np.arange(1.0, 6.0))
    s = q.init_store(seed=1, group_sizes=(2, 3))
    d = ScaleVector({"g0": 3.0, "g1": 0.5})
    for seed in range(10):
        base = expectation_modified_spsa(s, q, None, 1e-3, seed, d)
        assert expectation_modified_spsa(s, q, None, 1e-3, seed, d.scaled(4.0)) == pytest.approx(base / 4.0, rel=1e-9)


def unbiasedness_problem():
    """Fixed 5-D quadratic whose gradient entries are all of order one."""
    s = NoiseStream(101)
    lam = 0.5 + np.abs(s.normals(5))
    signs = np.sign(s.normals(5))
    g = signs * (1.0 + 0.5 * np.abs(s.normals(5)))
    q = Quadratic(lam)
    return q, q.store_from(g / lam, group_sizes=(2, 3))


def test_spsa_mean_matches_gradient():
    q, theta = unbiasedness_problem()
    mean, _ = _mean_estimate(theta, 100_000, 0, 1, estimator_sampler("spsa", q))
    g = q.grad(theta)
    assert np.all(np.abs(mean - g) <= 0.02 * np.abs(g))


def test_variance_modified_mean_matches_gradient():
    q, theta = unbiasedness_problem()
    d = ScaleVector({"g0": float(np.linalg.norm(theta.view("g0"))), "g1": float(np.linalg.norm(theta.view("g1")))})
    mean, _ = _mean_estimate(theta, 100_000, 0, 1, estimator_sampler("variance_modified", q, dvec=d))
    g = q.grad(theta)
    assert np.all(np.abs(mean - g) <= 0.02 * np.abs(g))


def test_expectation_modified_normalizes_groups():
    g = np.array([1.8, 2.4, 1.92, 2.56, 2.4])  # group norms 3 and 4
    q = Quadratic(np.ones(5))
    theta = q.store_from(g, group_sizes=(2, 3))
    d = ScaleVector({"g0": 3.0, "g1": 4.0})
    mean, _ = _mean_estimate(theta, 100_000, 0, 1, estimator_sampler("expectation_modified", q, dvec=d))
    for sl, norm in ((slice(0, 2), 3.0), (slice(2, 5), 4.0)):
        m = mean[sl]
        cos = float(m @ g[sl]) / (np.linalg.norm(m) * norm)
        assert math.acos(min(cos, 1.0)) < 0.02


def test_sphere_norm_ratio_n4():
    q = Quadratic(0.5 + np.arange(10) / 10)
    theta = q.init_store(seed=12)
    rep = check_norm_ratio(q, theta, 4, "sphere", 10_000, seed=0)
    assert rep.predicted == pytest.approx(3.25)
    assert rep.passed, rep.line()


def test_cubic_bias_grows_as_eps_squared():
    obj = Cubic()
    theta = ParamStore.from_arrays({"x": np.zeros(3)})
    means = []
    for eps in (1e-2, 1e-1):
        acc = np.zeros(3)
        for i in range(2000):
            seed = derive_step_seed(5, i, 0)
            acc += spsa_projected_grad(theta, obj, None, eps, seed) * direction_vector(theta, seed)
        means.append(np.linalg.norm(acc / 2000))
    slope = math.log(means[1] / means[0]) / math.log(10.0)
    assert slope == pytest.approx(2.0, abs=0.05)


# --- group gradient norm -------------------------------------------------------------


def group_problem():
    q = Quadratic(np.ones(4))
    theta = q.store_from([3.0, 4.0, 1.0, -1.0], group_sizes=(2, 2))
    return q, theta


def test_group_norm_zero_at_optimum():
    q = Quadratic(np.ones(4))
    theta = q.store_from(np.zeros(4), group_sizes=(2, 2))
    assert all(zo_group_grad_norm(theta, q, None, 1e-3, s, "g0") == 0.0 for s in range(10))


def test_group_norm_is_abs_directional_derivative():
    q, theta = group_problem()
    for seed in range(10):
        z = direction_vector(theta, seed, {"g0"})
        assert np.all(z[2:] == 0.0)
        est = zo_group_grad_norm(theta, q, None, 1e-3, seed, "g0")
        assert est == pytest.approx(abs(z[:2] @ [3.0, 4.0]), rel=1e-9)


def test_group_norm_squares_average_to_norm():
    q, theta = group_problem()
    sq = [zo_group_grad_norm(theta, q, None, 1e-3, derive_step_seed(0, i, 0), "g0") ** 2 for i in range(100_000)]
    assert np.mean(sq) == pytest.approx(25.0, rel=0.03)


def test_group_norm_unknown_group():
    q, theta = group_problem()
    with pytest.raises(KeyError):
        zo_group_grad_norm(theta, q, None, 1e-3, 0, "g9")


# --- scale sources -------------------------------------------------------------------


def test_scale_sources():
    q, theta = group_problem()
    ones = compute_scale_vector(EstimatorConfig(kind="variance_modified"), theta)
    assert dict(ones.values) == {"g0": 1.0, "g1": 1.0}
    pn = compute_scale_vector(EstimatorConfig(kind="variance_modified", scale_source="param_norm_per_group"), theta)
    assert pn.values["g0"] == 5.0 and pn.values["g1"] == pytest.approx(math.sqrt(2))
    ext = compute_scale_vector(EstimatorConfig(kind="variance_modified", scale_source="external",
                                               external_scale=(2.0, 3.0)), theta, mask={"g1"})
    assert dict(ext.values) == {"g0": 2.0, "g1": 3.0}
    cfg = EstimatorConfig(kind="variance_modified", scale_source="grad_norm_per_group", scale_probes=8)
    q.evals = 0
    gn = compute_scale_vector(cfg, theta, q, None, seed=11)
    assert q.evals == 2 * 8 * 2
    assert set(gn.values) == {"g0", "g1"}
    with pytest.raises(ValueError):
        compute_scale_vector(EstimatorConfig(kind="variance_modified", scale_source="external",
                                             external_scale=(1.0,)), theta)
