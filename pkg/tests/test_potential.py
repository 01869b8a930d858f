import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_theta
from driftscape.potential import (
    GaussianComponent,
    MixturePotential,
    ModelParams,
    drift,
    drift_jacobian,
    ea_bounds,
    h_value,
    lamperti_drift,
    laplacian_h,
    phi,
    potential_value,
    standard_potential,
)


def fd_grad(f, x, h=1e-5):
    e = np.eye(2)
    return np.array([(f(x + h * e[i]) - f(x - h * e[i])) / (2 * h) for i in range(2)])


def test_standard_potential_values():
    p = standard_potential()
    assert potential_value(p, [0.0, 0.0]) == pytest.approx(1.0)
    assert potential_value(p, [1.0, 0.0]) == pytest.approx(np.exp(-0.5))
    np.testing.assert_allclose(drift(p, [1.0, 0.0]), [-np.exp(-0.5), 0.0], rtol=1e-12)
    np.testing.assert_allclose(drift_jacobian(p, [0.0, 0.0]), -np.eye(2), atol=1e-15)


def test_h_value_scaling_example():
    # H(y) = P(gamma y) / gamma^2
    th = ModelParams(standard_potential(), 2.0)
    assert h_value(th, [0.5, 0.0]) == pytest.approx(0.151633, abs=1e-6)


def test_weights_rescaled_and_partial_weights():
    p = MixturePotential([GaussianComponent(2.0, (0, 0), np.eye(2)), GaussianComponent(6.0, (1, 1), np.eye(2))])
    np.testing.assert_allclose(p.weights, [0.25, 0.75])
    q = MixturePotential.from_arrays([0.3], [[0, 0], [1, 1]], [np.eye(2), 2 * np.eye(2)])
    np.testing.assert_allclose(q.weights, [0.3, 0.7])


@pytest.mark.parametrize(
    "w,C",
    [
        (0.0, np.eye(2)),
        (-1.0, np.eye(2)),
        (1.0, [[1.0, 0.0], [0.0, -1.0]]),
        (1.0, [[1.0, 0.5], [0.1, 1.0]]),
        (1.0, [[1.0, 1.0], [1.0, 1.0]]),
    ],
)
def test_invalid_component(w, C):
    with pytest.raises(ValueError):
        GaussianComponent(w, (0.0, 0.0), C)


def test_dict_round_trip(rng):
    th = random_theta(rng, k=3)
    back = ModelParams.from_dict(th.to_dict())
    np.testing.assert_array_equal(back.potential.centers, th.potential.centers)
    np.testing.assert_array_equal(back.potential.info, th.potential.info)
    assert back.gamma == th.gamma


def test_derivatives_match_finite_differences(rng):
    for _ in range(100):
        th = random_theta(rng)
        p = th.potential
        x = rng.uniform(-4, 4, 2)
        np.testing.assert_allclose(drift(p, x), fd_grad(lambda z: potential_value(p, z), x), rtol=1e-6, atol=1e-9)
        J_fd = np.stack([fd_grad(lambda z: drift(p, z)[i], x) for i in range(2)])
        np.testing.assert_allclose(drift_jacobian(p, x), J_fd, rtol=1e-5, atol=1e-8)
        y = x / th.gamma
        np.testing.assert_allclose(lamperti_drift(th, y), fd_grad(lambda z: h_value(th, z), y), rtol=1e-6, atol=1e-9)
        lap_fd = sum(fd_grad(lambda z: lamperti_drift(th, z)[i], y)[i] for i in range(2))
        assert laplacian_h(th, y) == pytest.approx(lap_fd, rel=1e-5, abs=1e-8)


def test_jacobian_is_symmetric(rng):
    th = random_theta(rng, k=3)
    J = drift_jacobian(th.potential, rng.normal(size=(50, 2)))
    np.testing.assert_array_equal(J, np.swapaxes(J, -1, -2))


def test_batched_shapes(rng):
    p = random_theta(rng, k=2).potential
    x = rng.normal(size=(4, 3, 2))
    assert potential_value(p, x).shape == (4, 3)
    assert drift(p, x).shape == (4, 3, 2)
    assert drift_jacobian(p, x).shape == (4, 3, 2, 2)
    assert isinstance(potential_value(p, [0.0, 0.0]), float)


def test_bounds_hold_on_random_points(rng):
    for _ in range(5):
        th = random_theta(rng)
        b = ea_bounds(th)
        y = rng.normal(scale=4.0 / th.gamma, size=(20000, 2))
        a = lamperti_drift(th, y)
        lap = laplacian_h(th, y)
        assert np.all(np.sum(a * a, axis=1) <= b.alpha_sq_upper * (1 + 1e-12))
        assert np.all(lap >= b.lap_lower - 1e-12)
        assert np.all(lap <= b.lap_upper + 1e-12)
        f = phi(th, b, y)
        assert np.all(f >= -1e-12) and np.all(f <= b.rate + 1e-12)


def test_bound_constants_standard():
    b = ea_bounds(ModelParams(standard_potential(), 1.0))
    assert b.alpha_sq_upper == pytest.approx(np.exp(-1))
    assert b.lap_lower == pytest.approx(-2.0)
    assert b.lap_upper == pytest.approx(2 * np.exp(-1))
    assert b.rate == pytest.approx(0.5 * (3 * np.exp(-1) + 2.0))


def test_h_range(rng):
    th = random_theta(rng)
    y = rng.normal(scale=3, size=(1000, 2))
    h = h_value(th, y)
    assert np.all(h >= 0) and np.all(h <= 1 / th.gamma**2 + 1e-15)


def test_translation_equivariance(rng):
    p = random_theta(rng, k=2).potential
    s = np.array([1.5, -0.7])
    x = rng.normal(size=(10, 2))
    np.testing.assert_allclose(potential_value(p.translated(s), x + s), potential_value(p, x), rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    w=st.lists(st.floats(0.05, 5.0), min_size=1, max_size=3),
    x=st.tuples(st.floats(-10, 10), st.floats(-10, 10)),
    gamma=st.floats(0.1, 5.0),
    seed=st.integers(0, 2**16),
)
def test_phi_within_bounds_property(w, x, gamma, seed):
    r = np.random.default_rng(seed)
    comps = []
    for wk in w:
        A = r.normal(size=(2, 2))
        comps.append(GaussianComponent(wk, r.uniform(-3, 3, 2), A @ A.T + 0.1 * np.eye(2)))
    th = ModelParams(MixturePotential(comps), gamma)
    b = ea_bounds(th)
    assert abs(th.potential.weights.sum() - 1) < 1e-12
    v = phi(th, b, np.array(x) / gamma)
    assert -1e-12 <= v <= b.rate + 1e-12
    assert 0 < potential_value(th.potential, np.array(x)) + 1e-300 <= 1 + 1e-12
