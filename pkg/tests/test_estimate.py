import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_theta
from driftscape.data import Track, TrajectorySet
from driftscape.errors import LengthMismatch
from driftscape.estimate import (
    FitResult,
    OptimizerConfig,
    canonicalize,
    fit,
    n_params,
    optimize,
    pack,
    unpack,
    unpack_arrays,
)
from driftscape.exact import ea1_transition_sample
from driftscape.potential import ModelParams, standard_potential
from driftscape.transition import pseudo_loglik


def test_n_params():
    assert n_params(1) == 6 and n_params(2) == 12 and n_params(2, with_gamma=False) == 11


def test_pack_round_trip(rng):
    for _ in range(1000):
        th = random_theta(rng)
        back = unpack(pack(th), th.k)
        np.testing.assert_allclose(back.potential.weights, th.potential.weights, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(back.potential.centers, th.potential.centers, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(back.potential.info, th.potential.info, rtol=1e-10, atol=1e-12)
        assert back.gamma == pytest.approx(th.gamma, rel=1e-10)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=6, max_size=6))
def test_any_finite_vector_unpacks_k1(v):
    th = unpack(np.array(v), 1)
    assert abs(th.potential.weights.sum() - 1) < 1e-12
    assert np.linalg.eigvalsh(th.potential.info[0]).min() > 0
    assert th.gamma > 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=12, max_size=12))
def test_any_finite_vector_unpacks_k2(v):
    th = unpack(np.array(v), 2)
    assert th.k == 2 and th.gamma > 0


def test_unpack_length_mismatch():
    with pytest.raises(LengthMismatch):
        unpack(np.zeros(7), 1)


def test_unpack_batched_shapes(rng):
    V = rng.normal(size=(5, 12))
    w, c, info, g = unpack_arrays(V, 2)
    assert w.shape == (5, 2) and c.shape == (5, 2, 2) and info.shape == (5, 2, 2, 2) and g.shape == (5,)
    w1, c1, i1, g1 = unpack_arrays(V[3], 2)
    np.testing.assert_array_equal(c1, c[3])


def test_canonicalize_orders_centers(rng):
    th = random_theta(rng, k=3)
    can = canonicalize(th)
    cx = can.potential.centers[:, 0]
    assert np.all(np.diff(cx) >= 0)
    x = rng.normal(size=(10, 2))
    from driftscape.potential import potential_value

    np.testing.assert_allclose(potential_value(can.potential, x), potential_value(th.potential, x), rtol=1e-12)


def test_optimize_contract():
    f = lambda X: -np.sum((np.atleast_2d(X) - 1.5) ** 2, axis=1)
    cfg = OptimizerConfig(max_evals=500, seed=3)
    a = optimize(f, cfg, x0=np.zeros(3), batch=True)
    b = optimize(f, cfg, x0=np.zeros(3), batch=True)
    assert a.evaluations <= 500
    assert np.all(np.diff(a.trace) >= 0)
    np.testing.assert_array_equal(a.best, b.best)
    np.testing.assert_allclose(a.best, 1.5, atol=1e-3)


def test_optimize_never_worse_than_start():
    f = lambda x: -np.inf if x[0] > 0.001 else -x[0] ** 2
    res = optimize(f, OptimizerConfig(max_evals=50), x0=np.zeros(2), stds=np.ones(2))
    assert res.value == 0.0


def simulate_k1(dt=0.1, g=10, n=500, gamma=1.0, seed=0):
    th = ModelParams(standard_potential(), gamma)
    rng = np.random.default_rng(seed)
    x = np.zeros((g, 2))
    path = [x]
    for _ in range(n - 1):
        x = ea1_transition_sample(th, x, dt, rng)
        path.append(x)
    P = np.array(path)
    return th, TrajectorySet(Track(str(j), np.arange(n) * dt, P[:, j]) for j in range(g))


@pytest.fixture(scope="module")
def k1_data():
    return simulate_k1()


@pytest.mark.xfail(reason="at gamma=1 the unit bump is too shallow: the likelihood maximizer itself sits far from the truth", strict=False)
def test_euler_recovery_k1_gamma1(k1_data):
    th, data = k1_data
    res = fit("euler", data, 1, OptimizerConfig(restarts=2, max_evals=800, seed=1))
    # the optimizer is not at fault: the fitted objective beats the truth
    assert res.objective >= pseudo_loglik("euler", th, data).value
    assert np.linalg.norm(res.theta_hat.potential.centers[0]) < 0.2
    assert res.theta_hat.gamma == pytest.approx(1.0, rel=0.1)


def test_euler_recovery_k1():
    th, data = simulate_k1(gamma=0.5)
    res = fit("euler", data, 1, OptimizerConfig(restarts=2, max_evals=800, seed=1))
    assert np.linalg.norm(res.theta_hat.potential.centers[0]) < 0.2
    assert res.theta_hat.gamma == pytest.approx(0.5, rel=0.1)
    assert res.objective == pytest.approx(pseudo_loglik("euler", res.theta_hat, data).value)
    assert res.objective >= max(res.restart_objectives) - 1e-9


def test_fit_deterministic(k1_data):
    _, data = k1_data
    cfg = OptimizerConfig(restarts=1, max_evals=300, seed=5)
    a = fit("ozaki", data, 1, cfg)
    b = fit("ozaki", data, 1, cfg)
    assert a.to_dict() == b.to_dict()


def test_adaptive_kessler_monotone_and_consistent(k1_data):
    _, data = k1_data
    cfg = OptimizerConfig(restarts=1, max_evals=800, seed=2)
    ak = fit("adaptive_kessler", data, 1, cfg)
    assert np.all(np.diff(ak.history) >= -1e-9)
    assert ak.extra["gamma0"] ** 2 == pytest.approx(data.quadratic_variation_gamma2())
    k = fit("kessler", data, 1, cfg)
    assert ak.objective == pytest.approx(k.objective, abs=0.5)
    np.testing.assert_allclose(ak.theta_hat.potential.centers, k.theta_hat.potential.centers, atol=0.05)


def test_kessler_reports_skipped_fraction(k1_data):
    _, data = k1_data
    res = fit("kessler", data, 1, OptimizerConfig(restarts=1, max_evals=200))
    assert 0.0 <= res.skipped_fraction <= 1.0
    assert "skipped_fraction" in res.to_dict()


def test_fit_result_dict_round_trip(k1_data):
    _, data = k1_data
    res = fit("euler", data, 1, OptimizerConfig(restarts=1, max_evals=200))
    back = FitResult.from_dict(res.to_dict())
    assert back.to_dict() == res.to_dict()
