import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from vpseg.wasserstein import (
    LinearCritic,
    as_empirical,
    clipped_linear_optimum,
    critic_ascent_step,
    index_cost,
    kr_dual_estimate,
    w1_categorical,
    w1_empirical_1d,
    w1_lp_oracle,
    w1_simplex_k2,
)

dist = st.integers(2, 6).flatmap(
    lambda K: st.lists(st.floats(0, 1), min_size=K, max_size=K).filter(lambda v: sum(v) > 1e-3)
)


def normalize(v):
    v = np.asarray(v, dtype=float)
    return v / v.sum()


def test_hand_cases():
    assert w1_categorical([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0
    assert w1_categorical([1, 0, 0], [0, 0, 1]) == 2.0
    p, q = [0.5, 0.5, 0.0], [0.0, 0.5, 0.5]
    assert w1_categorical(p, q) == pytest.approx(1.0)
    assert w1_lp_oracle(p, q, index_cost(3)) == pytest.approx(1.0, abs=1e-12)


def test_lp_oracle_point_masses_and_custom_cost():
    rng = np.random.default_rng(0)
    C = rng.random((4, 4))
    np.fill_diagonal(C, 0)
    for i, j in itertools.product(range(4), repeat=2):
        assert w1_lp_oracle(np.eye(4)[i], np.eye(4)[j], C) == pytest.approx(C[i, j], abs=1e-12)
    p = normalize(rng.random(4))
    assert w1_lp_oracle(p, p, C) == pytest.approx(0.0, abs=1e-12)
    assert w1_categorical(p, np.eye(4)[0], cost=C) == pytest.approx(w1_lp_oracle(p, np.eye(4)[0], C))
    with pytest.raises(ValueError):
        w1_lp_oracle(np.ones(9) / 9, np.ones(9) / 9, index_cost(9))


def test_cdf_matches_lp_on_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(40):
        K = rng.integers(2, 7)
        p, q = rng.dirichlet(np.ones(K)), rng.dirichlet(np.ones(K))
        assert abs(w1_categorical(p, q) - w1_lp_oracle(p, q, index_cost(K))) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(dist, st.data())
def test_metric_axioms(p, data):
    K = len(p)
    q = data.draw(st.lists(st.floats(0, 1), min_size=K, max_size=K).filter(lambda v: sum(v) > 1e-3))
    r = data.draw(st.lists(st.floats(0, 1), min_size=K, max_size=K).filter(lambda v: sum(v) > 1e-3))
    p, q, r = normalize(p), normalize(q), normalize(r)
    assert w1_categorical(p, q) == pytest.approx(w1_categorical(q, p), abs=1e-12)
    assert w1_categorical(p, p) == 0.0
    assert w1_categorical(p, r) <= w1_categorical(p, q) + w1_categorical(q, r) + 1e-9
    assert 0.0 <= w1_categorical(p, q) <= K - 1 + 1e-12


def test_input_validation():
    with pytest.raises(ValueError):
        w1_categorical([0.5, 0.5], [0.2, 0.3, 0.5])
    with pytest.raises(ValueError):
        w1_categorical([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError):
        as_empirical([[0.5, 0.6]])
    assert as_empirical([[0.5, 0.5]]).shape == (1, 2)


def test_empirical_1d_vs_assignment_brute_force():
    assert w1_empirical_1d([0.0], [1.0]) == 1.0
    assert w1_empirical_1d([3, 1, 2], [2, 3, 1]) == 0.0
    rng = np.random.default_rng(2)
    for _ in range(5):
        x, y = rng.random(5), rng.random(5)
        best = min(np.abs(x - y[list(perm)]).mean() for perm in itertools.permutations(range(5)))
        assert w1_empirical_1d(x, y) == pytest.approx(best, abs=1e-12)
    with pytest.raises(ValueError):
        w1_empirical_1d([1, 2], [1])


def test_simplex_k2_is_euclidean_w1():
    rng = np.random.default_rng(3)
    t, s = rng.random(6), rng.random(6)
    xs, ys = np.stack([t, 1 - t], 1), np.stack([s, 1 - s], 1)
    best = min(
        np.linalg.norm(xs - ys[list(perm)], axis=1).mean() for perm in itertools.permutations(range(6))
    )
    assert w1_simplex_k2(xs, ys) == pytest.approx(best, abs=1e-12)


def test_critic_invariants():
    c = LinearCritic.zeros(3, clip=0.05)
    assert c.lipschitz_bound == pytest.approx(0.05 * np.sqrt(3))
    with pytest.raises(ValueError):
        LinearCritic(np.array([0.2, 0.0]), clip=0.1)
    with pytest.raises(ValueError):
        c.weights[0] = 1.0  # read-only


def test_kr_estimate_trivial_cases():
    rng = np.random.default_rng(4)
    x = rng.dirichlet(np.ones(3), size=5)
    critic = LinearCritic(np.array([0.01, -0.004, 0.002]))
    assert kr_dual_estimate(critic, x, x) == 0.0
    assert kr_dual_estimate(LinearCritic.zeros(3), x, rng.dirichlet(np.ones(3), size=5)) == 0.0


def test_critic_step_direction_and_clip():
    gt, pred = np.array([[0.0, 1.0, 0.0]]), np.array([[0.0, 0.0, 1.0]])
    c = critic_ascent_step(LinearCritic.zeros(3), gt, pred, lr=1e-3)
    assert c.weights[1] > 0 > c.weights[2]
    for _ in range(100):
        c = critic_ascent_step(c, gt, pred, lr=1.0)
        assert np.abs(c.weights).max() <= c.clip
    with pytest.raises(ValueError):
        critic_ascent_step(c, gt[:0], pred, 0.1)


def test_ascent_converges_to_clipped_linear_optimum():
    rng = np.random.default_rng(5)
    gt = rng.dirichlet([5, 1, 1], size=20)
    pred = rng.dirichlet([1, 1, 5], size=20)
    c = LinearCritic.zeros(3)
    values = []
    for _ in range(300):
        c = critic_ascent_step(c, gt, pred, lr=1e-2)
        values.append(kr_dual_estimate(c, gt, pred))
    assert np.all(np.diff(values) >= -1e-15)
    assert values[-1] == pytest.approx(clipped_linear_optimum(c, gt, pred), rel=1e-9)


def test_weak_duality_k2():
    rng = np.random.default_rng(6)
    for _ in range(50):
        t, s = rng.random(8), rng.random(8)
        gt, pred = np.stack([t, 1 - t], 1), np.stack([s, 1 - s], 1)
        c = LinearCritic(rng.uniform(-0.01, 0.01, 2), bias=rng.normal())
        assert kr_dual_estimate(c, gt, pred) <= w1_simplex_k2(gt, pred) + 1e-9


def test_trained_critic_close_to_exact():
    rng = np.random.default_rng(7)
    t, s = rng.uniform(0.6, 0.9, 30), rng.uniform(0.1, 0.4, 30)
    gt, pred = np.stack([t, 1 - t], 1), np.stack([s, 1 - s], 1)
    c = LinearCritic.zeros(2)
    for _ in range(500):
        c = critic_ascent_step(c, gt, pred, lr=1e-2)
    assert kr_dual_estimate(c, gt, pred) == pytest.approx(w1_simplex_k2(gt, pred), rel=0.1)
