import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfnode.model import (ACTIVATIONS, Dataset, LiftedProblem, ParameterMeasure, energy,
                          get_activation, init_fixup, init_random, join_particles, lift,
                          lifted_loss, pairwise_separation, param_dim, residual_field,
                          slice_rng, split_particles, synthetic_dataset)


@pytest.mark.parametrize("name", ACTIVATIONS)
def test_activation_derivatives_match_finite_differences(name):
    act = get_activation(name)
    x = np.linspace(-3, 3, 41)
    h = 1e-6
    np.testing.assert_allclose(act.d1(x), (act(x + h) - act(x - h)) / (2 * h), atol=1e-8)
    np.testing.assert_allclose(act.d2(x), (act.d1(x + h) - act.d1(x - h)) / (2 * h), atol=1e-7)


def test_activation_bounds():
    assert get_activation("tanh").bound == pytest.approx(1.0)
    assert get_activation("cos").bound == pytest.approx(2.0)
    with pytest.raises(ValueError):
        get_activation("relu6")


@given(st.integers(1, 4), st.integers(1, 5))
def test_split_join_roundtrip(dim, m):
    theta = np.arange(m * param_dim(dim), dtype=float).reshape(m, -1)
    u, w, b = split_particles(theta, dim)
    assert u.shape == (m, dim) and w.shape == (m, dim) and b.shape == (m,)
    np.testing.assert_array_equal(join_particles(u, w, b), theta)


def test_measure_is_immutable_and_validated():
    mu = init_random(2, 3, 2, seed=1)
    with pytest.raises(ValueError):
        mu.theta[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        ParameterMeasure(np.zeros((2, 3, 4)))  # 4 is not 2D+1
    with pytest.raises(ValueError):
        ParameterMeasure(np.full((1, 1, 3), np.nan))


def test_checkpoint_roundtrip(tmp_path):
    mu = init_fixup(3, 5, 2, {"kind": "gaussian", "rho": 0.7}, activation="cos", seed=11)
    assert ParameterMeasure.from_bytes(mu.to_bytes()) == mu
    path = tmp_path / "mu.ckpt"
    mu.save(path)
    back = ParameterMeasure.load(path)
    assert back == mu and back.seed == 11 and back.activation == "cos"
    np.testing.assert_array_equal(back.theta, mu.theta)


def test_checkpoint_rejects_bad_header():
    mu = init_random(1, 2, 1)
    raw = mu.to_bytes().replace(b'"version": 1', b'"version": 99')
    with pytest.raises(ValueError):
        ParameterMeasure.from_bytes(raw)
    with pytest.raises(ValueError):
        ParameterMeasure.from_bytes(mu.to_bytes()[:-8])


def test_energy_examples():
    assert energy(ParameterMeasure(np.zeros((2, 3, 5)))) == 0.0
    assert energy(ParameterMeasure(np.ones((1, 1, 3)))) == 3.0
    mu = init_random(4, 2, 2, seed=3)
    brute = sum(float(mu.theta[k, j] @ mu.theta[k, j]) for k in range(4) for j in range(2)) / 8
    assert energy(mu) == pytest.approx(brute, rel=1e-14)


def test_phi_growth_bound_on_samples():
    rng = np.random.default_rng(0)
    for name in ("tanh", "cos", "gelu", "swish"):
        act = get_activation(name)
        for _ in range(200):
            om = rng.standard_normal(5) * 3
            x = rng.standard_normal(2) * 3
            u, w, b = om[:2], om[2:4], om[4]
            phi = u * act(w @ x + b)
            assert np.linalg.norm(phi) <= act.bound * (1 + np.linalg.norm(x)) * (1 + om @ om)


def test_fixup_structure_and_tied_slices():
    mu = init_fixup(4, 6, 3, {"kind": "sphere_uniform"}, activation="tanh", seed=2)
    assert np.all(mu.u == 0.0)
    tied = init_fixup(4, 6, 3, {"kind": "gaussian"}, seed=2, tied_slices=True)
    for k in range(1, 4):
        np.testing.assert_array_equal(tied.theta[k], tied.theta[0])


def test_fixup_is_a_pure_function_of_seed_and_slice():
    a = init_fixup(2, 8, 2, {"kind": "gaussian"}, seed=5)
    b = init_fixup(5, 8, 2, {"kind": "gaussian"}, seed=5)
    np.testing.assert_array_equal(a.theta, b.theta[:2])
    c = init_fixup(2, 8, 2, {"kind": "gaussian"}, seed=6)
    assert not np.array_equal(a.theta, c.theta)
    x1 = slice_rng(1, 3).standard_normal(4)
    assert np.array_equal(x1, slice_rng(1, 3).standard_normal(4))


def test_gaussian_feature_second_moment():
    d, m = 3, 10_000
    mu = init_fixup(1, m, d, {"kind": "gaussian", "rho": 1.0}, seed=0)
    sq = np.sum(mu.w[0] ** 2, axis=1)
    se = sq.std(ddof=1) / math.sqrt(m)
    assert abs(sq.mean() - d) < 3 * se


def test_cos_bias_law_and_grid_features():
    mu = init_fixup(1, 2000, 2, {"kind": "gaussian"}, activation="cos", seed=1)
    assert mu.b[0].min() >= 0 and mu.b[0].max() <= math.pi
    grid = init_fixup(1, 9, 2, {"kind": "grid", "scale": 1.0}, activation="cos")
    assert np.all(np.abs(grid.w[0]) <= 1.0)
    with pytest.raises(ValueError):
        init_fixup(1, 4, 3, {"kind": "matern", "nu": 1.0})  # needs nu > d/2
    with pytest.raises(ValueError):
        init_fixup(1, 4, 3, {"kind": "laplace"})


def test_dataset_separation_and_csv(tmp_path):
    ds = Dataset([[0.0, 0.0], [1.0, 0.0]], [[0.5], [1.5]])
    assert ds.separation == 1.0
    assert Dataset([[1.0], [1.0], [3.0]], [[0.0]] * 3).separation == 0.0
    path = tmp_path / "d.csv"
    ds.to_csv(path)
    back = Dataset.from_csv(path)
    np.testing.assert_array_equal(back.xs, ds.xs)
    np.testing.assert_array_equal(back.ys, ds.ys)
    path.write_text("x1,y1\n1,abc\n")
    with pytest.raises(ValueError):
        Dataset.from_csv(path)
    with pytest.raises(ValueError):
        pairwise_separation(np.zeros((1, 2)))


def test_separation_matches_brute_force():
    rng = np.random.default_rng(4)
    X = rng.uniform(-1, 1, (12, 3))
    brute = min(np.linalg.norm(X[i] - X[j]) for i in range(12) for j in range(i))
    assert pairwise_separation(X) == pytest.approx(brute, rel=1e-15)


def test_square_loss_needs_matching_dims():
    ds = Dataset(np.zeros((2, 2)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        ds.losses(np.zeros((2, 2)))


def test_lift_examples():
    lp = lift(Dataset([[1.0, 2.0]], [[0.0]]), 1.0)
    np.testing.assert_array_equal(lp.inputs, [[1.0, 2.0, 0.0]])
    np.testing.assert_array_equal(lp.B @ lp.A, np.zeros((1, 2)))
    assert lifted_loss([0.0, 0.0, 1.0], [2.0], 3.0) == 0.5
    with pytest.raises(ValueError):
        lift(Dataset([[1.0]], [[1.0]]), 0.0)


def test_lifted_loss_gradient_matches_fd():
    rng = np.random.default_rng(2)
    lp = LiftedProblem(Dataset(rng.standard_normal((3, 2)), rng.standard_normal((3, 2))), 2.5)
    z = rng.standard_normal((3, 4))
    g = lp.loss_grad(z)
    h = 1e-6
    for i in range(3):
        for c in range(4):
            e = np.zeros_like(z)
            e[i, c] = h
            fd = (lp.losses(z + e)[i] - lp.losses(z - e)[i]) / (2 * h)
            assert fd == pytest.approx(g[i, c], abs=1e-8)


def test_residual_field_single_particle():
    theta = np.array([[[2.0, 0.5, 0.1]]])
    mu = ParameterMeasure(theta, activation="tanh")
    x = np.array([[0.3], [-1.0]])
    np.testing.assert_allclose(residual_field(mu, 0, x)[:, 0], 2.0 * np.tanh(0.5 * x[:, 0] + 0.1))


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 10), st.floats(0.05, 0.4), st.integers(0, 1000))
def test_synthetic_dataset_respects_separation(N, sep, seed):
    ds = synthetic_dataset(N, 2, 1, ball_radius=2.0, min_separation=sep, seed=seed)
    assert ds.N == N and ds.separation >= sep
    assert np.all(np.linalg.norm(ds.xs, axis=1) <= 2.0)
    assert np.all(np.linalg.norm(ds.ys, axis=1) <= 1.0)


def test_synthetic_dataset_attempt_cap():
    with pytest.raises(RuntimeError):
        synthetic_dataset(50, 1, 1, ball_radius=1.0, min_separation=0.5, max_attempts=1000)
