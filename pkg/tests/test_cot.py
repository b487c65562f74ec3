import itertools
import math

import numpy as np
import pytest

from mfnode.cot import (Sinkhorn, cot_distance, diagonal_cost, displacement,
                        distance_derivative_check, perturb, same_measure, sinkhorn_plan,
                        tangent_approximation_residual, wasserstein_lower_bound)
from mfnode.flow import gradient
from mfnode.model import Dataset, ParameterMeasure, init_random
from mfnode.trainer import gradient_velocity


def random_cloud(rng, S, m, p):
    return rng.standard_normal((S, m, p))


def rem23_pair(n):
    """2n slices; one measure alternates +-1 atoms, the other splits every slice in half."""
    S = 2 * n
    alt = np.zeros((S, 2, 3))
    mix = np.zeros((S, 2, 3))
    for k in range(S):
        alt[k, :, 0] = 1.0 if k % 2 == 0 else -1.0
        mix[k, :, 0] = [1.0, -1.0]
    return alt, mix


def test_identical_measures():
    rng = np.random.default_rng(0)
    a = random_cloud(rng, 3, 4, 5)
    d, plan = cot_distance(a, a)
    assert d == 0.0
    for perm in plan.perms:
        np.testing.assert_array_equal(perm, np.arange(4))


def test_single_particle_slices():
    rng = np.random.default_rng(1)
    a, b = random_cloud(rng, 5, 1, 3), random_cloud(rng, 5, 1, 3)
    d, _ = cot_distance(a, b)
    assert d ** 2 == pytest.approx(np.mean(np.sum((a - b) ** 2, axis=-1)), rel=1e-14)


def test_metric_axioms_on_random_triples():
    rng = np.random.default_rng(2)
    for _ in range(200):
        S, m, p = rng.integers(1, 9), rng.integers(1, 7), rng.choice([3, 5])
        a, b, c = (random_cloud(rng, S, m, p) for _ in range(3))
        dab, dba = cot_distance(a, b)[0], cot_distance(b, a)[0]
        assert dab == dba
        assert cot_distance(a, c)[0] <= dab + cot_distance(b, c)[0] + 1e-9


def test_zero_distance_iff_same_multisets():
    rng = np.random.default_rng(3)
    a = random_cloud(rng, 4, 5, 3)
    shuffled = np.stack([a[k][rng.permutation(5)] for k in range(4)])
    assert same_measure(a, shuffled)
    assert cot_distance(a, shuffled)[0] == pytest.approx(0.0, abs=1e-12)
    moved = shuffled.copy()
    moved[2, 1, 0] += 1e-3
    assert not same_measure(a, moved)
    assert cot_distance(a, moved)[0] > 0


@pytest.mark.parametrize("m", [2, 3, 4, 5, 6])
def test_slice_plans_are_brute_force_optimal(m):
    rng = np.random.default_rng(m)
    a, b = random_cloud(rng, 3, m, 3), random_cloud(rng, 3, m, 3)
    _, plan = cot_distance(a, b)
    for k in range(3):
        C = np.sum((a[k][:, None] - b[k][None]) ** 2, axis=-1)
        brute = min(C[np.arange(m), list(perm)].mean() for perm in itertools.permutations(range(m)))
        assert plan.slice_costs[k] == pytest.approx(brute, rel=1e-12)


def test_joint_lower_bound_and_diagonal_lift():
    rng = np.random.default_rng(5)
    for _ in range(30):
        S, m = rng.integers(1, 6), rng.integers(1, 6)
        a, b = random_cloud(rng, S, m, 3), random_cloud(rng, S, m, 3)
        d, plan = cot_distance(a, b)
        assert wasserstein_lower_bound(a, b) <= d + 1e-12
        assert diagonal_cost(a, b, plan) == pytest.approx(d ** 2, rel=1e-12)
    assert wasserstein_lower_bound(a, a) == 0.0
    with pytest.raises(ValueError):
        wasserstein_lower_bound(np.zeros((64, 9, 3)), np.zeros((64, 9, 3)))


@pytest.mark.parametrize("n", [4, 8, 16])
def test_conditional_distance_counterexample(n):
    alt, mix = rem23_pair(n)
    assert cot_distance(alt, mix)[0] >= 1.0
    assert wasserstein_lower_bound(alt, mix) <= 1.0 / (2 * n) + 1e-12


def test_sinkhorn_is_an_upper_bound_and_handles_unequal_counts():
    rng = np.random.default_rng(6)
    a, b = random_cloud(rng, 2, 5, 3), random_cloud(rng, 2, 5, 3)
    exact = cot_distance(a, b)[0]
    approx, plan = cot_distance(a, b, Sinkhorn(eps=1e-3))
    assert exact - 1e-9 <= approx <= exact * 1.05
    for P in plan.plans:
        np.testing.assert_allclose(P.sum(axis=1), 0.2, atol=1e-7)
    c = random_cloud(rng, 2, 3, 3)
    d, plan = cot_distance(a, c, Sinkhorn(eps=1e-2))
    assert d > 0 and plan.plans[0].shape == (5, 3)
    with pytest.raises(ValueError):
        cot_distance(a, c)
    P, iters = sinkhorn_plan(np.zeros((3, 3)), 1e-2)
    np.testing.assert_allclose(P, 1 / 9)


def test_displacement_endpoints_and_midpoint():
    rng = np.random.default_rng(7)
    a, b = random_cloud(rng, 3, 4, 3), random_cloud(rng, 3, 4, 3)
    np.testing.assert_array_equal(displacement(a, b, 0.0), a)
    assert same_measure(displacement(a, b, 1.0), b)
    x, y = random_cloud(rng, 2, 1, 3), random_cloud(rng, 2, 1, 3)
    np.testing.assert_allclose(displacement(x, y, 0.5), 0.5 * (x + y))
    d, _ = cot_distance(a, b)
    assert cot_distance(a, displacement(a, b, 0.3))[0] == pytest.approx(0.3 * d, rel=1e-9)


def test_tangent_residual_examples():
    rng = np.random.default_rng(8)
    a = random_cloud(rng, 2, 3, 3)
    assert tangent_approximation_residual(a, np.zeros_like(a), 1e-2) == 0.0
    v = np.broadcast_to(rng.standard_normal(3), a.shape)
    assert tangent_approximation_residual(a, v, 1e-2) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        tangent_approximation_residual(a, v, 0.0)


def test_tangent_residual_is_linear_in_h_along_gradient_flow():
    rng = np.random.default_rng(9)
    mu = init_random(2, 3, 2, scale=1.0, activation="tanh", seed=9)
    ds = Dataset(rng.uniform(-1, 1, (3, 2)), rng.uniform(-1, 1, (3, 2)))
    vel = gradient_velocity(ds, mu)
    r1 = tangent_approximation_residual(mu, vel, 1e-2)
    r2 = tangent_approximation_residual(mu, vel, 1e-3)
    assert 7.0 < r1 / r2 < 13.0


def test_distance_derivative_examples():
    rng = np.random.default_rng(10)
    ref = random_cloud(rng, 2, 3, 3)
    still = random_cloud(rng, 2, 3, 3)
    rep = distance_derivative_check([still] * 3, ref, [np.zeros_like(still)] * 3, 1e-3)
    assert np.all(rep.finite_difference == 0) and np.all(rep.pairing == 0)
    # single-particle slices: the identity coupling is the only one
    x0, v, ref1 = (random_cloud(rng, 3, 1, 3) for _ in range(3))
    dt = 1e-3
    curve = [x0 + n * dt * v for n in range(3)]
    rep = distance_derivative_check(curve, ref1, [v] * 3, dt)
    expected = 2 * np.mean(np.sum((curve[1] - ref1) * v, axis=-1))
    assert rep.pairing[0] == pytest.approx(expected, rel=1e-14)
    assert rep.max_rel_discrepancy < 1e-9


def test_distance_derivative_random_curve():
    rng = np.random.default_rng(11)
    ref = random_cloud(rng, 3, 4, 3)
    x0, v, acc = (random_cloud(rng, 3, 4, 3) for _ in range(3))
    dt = 1e-3
    times = dt * np.arange(4)
    curve = [x0 + t * v + 0.5 * t * t * acc for t in times]
    vel = [v + t * acc for t in times]
    assert distance_derivative_check(curve, ref, vel, dt).max_rel_discrepancy <= 1e-2


def test_perturbation_scales_shrink_distance_monotonically():
    mu = ParameterMeasure(np.random.default_rng(12).standard_normal((4, 5, 3)))
    direction = np.random.default_rng(13).standard_normal(mu.theta.shape)
    rng = np.random.default_rng(0)
    ds = [cot_distance(mu, perturb(mu, eps, rng, direction))[0] for eps in (1.0, 0.1, 0.01, 0.001)]
    assert all(x > y for x, y in zip(ds, ds[1:]))
    assert ds[-1] <= 1e-3 + 1e-15
    with pytest.raises(ValueError):
        cot_distance(np.zeros((2, 3, 3)), np.zeros((3, 3, 3)))
    assert math.isfinite(ds[0])
