import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from sensepath.environment import Bounds
from sensepath.occupancy import (
    Grid3,
    HingeSet,
    WeightPosterior,
    export_grid,
    feature_matrix,
    features,
    init_posterior,
    lattice_shape,
    learn_params,
    moderated_sigmoid,
    query,
    query_points,
)

from oracles import logistic_posterior_1d, logistic_posterior_2d


def spaced_hinges(m, spacing=10.0, **kw):
    """Hinges far enough apart that every sample touches exactly one."""
    pts = np.column_stack([np.arange(m) * spacing, np.zeros(m), np.zeros(m)])
    return HingeSet(pts, gamma=math.log(2.0), **kw)


def random_orthogonal_instance(rng, m_max=10):
    m = int(rng.integers(1, m_max + 1))
    hinges = spaced_hinges(m)
    pts, ys, counts = [], [], []
    for j in range(m):
        n = int(rng.integers(300, 601))
        n1 = int(round(n * rng.uniform(0.35, 0.65)))
        pts += [hinges.points[j]] * n
        ys += [1] * n1 + [0] * (n - n1)
        counts.append((n1, n - n1))
    return hinges, np.array(pts), np.array(ys), counts


def test_feature_examples():
    h = HingeSet(np.array([[0.0, 0, 0], [1.0, 0, 0], [50.0, 0, 0]]), gamma=math.log(2.0), cutoff=0.0, bias=True)
    f = features([0.0, 0.0, 0.0], h)
    assert len(f) == 4
    assert f[0] == 1.0
    assert f[1] == pytest.approx(0.5, abs=1e-15)
    assert f[2] < 1e-300
    assert f[3] == 1.0


def test_cutoff_zeroes_small_values():
    h = HingeSet(np.array([[0.0, 0, 0]]), gamma=1.0, cutoff=0.1)
    assert features([0, 0, math.sqrt(-math.log(0.1)) * 1.01], h)[0] == 0.0
    assert h.radius == pytest.approx(math.sqrt(math.log(10.0)))


def test_lattice_default_support_spans_two_spacings():
    b = Bounds((0, 0, -6), (20, 20, 0))
    h = HingeSet.lattice(b, (17, 17, 12))
    assert h.m == 3468
    spacing = np.mean([20 / 16, 20 / 16, 6 / 11])
    assert h.radius == pytest.approx(spacing)
    np.testing.assert_allclose(h.points.min(0), b.lo)
    np.testing.assert_allclose(h.points.max(0), b.hi)


def test_sparse_matches_dense(env):
    h = HingeSet.lattice(env.bounds, (7, 7, 5))
    pts = np.random.default_rng(0).uniform(env.bounds.lo, env.bounds.hi, (50, 3))
    dense = np.array([features(p, h) for p in pts])
    np.testing.assert_allclose(feature_matrix(pts, h).toarray(), dense, rtol=0, atol=1e-15)


def test_init_posterior():
    p = init_posterior(3, 1e4, bias=True)
    np.testing.assert_array_equal(p.mu, np.zeros(4))
    np.testing.assert_array_equal(p.sigma_sq, np.full(4, 1e4))
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            init_posterior(3, bad)


def test_prior_queries_are_half(env):
    h = HingeSet.lattice(env.bounds, (7, 7, 5))
    post = init_posterior(h.n_features)
    for x in np.random.default_rng(1).uniform(env.bounds.lo, env.bounds.hi, (20, 3)):
        assert query(x, post, h).prob == 0.5
    grid = export_grid(post, h, env.bounds, 0.5)
    assert np.all(grid.values == 0.5)


def test_moderation_examples():
    assert moderated_sigmoid(1.3, 0.0) == pytest.approx(expit(1.3), abs=1e-15)
    assert moderated_sigmoid(0.0, 5.0) == 0.5
    assert 0 < moderated_sigmoid(-1e6, 0.0) < moderated_sigmoid(1e6, 0.0) < 1


def test_query_vs_monte_carlo():
    rng = np.random.default_rng(4)
    h = HingeSet(rng.uniform(0, 2, (6, 3)), gamma=0.7, cutoff=0.0)
    post = WeightPosterior(rng.normal(0, 1, 6), rng.uniform(0.1, 1.0, 6))
    x = np.array([1.0, 1.0, 1.0])
    phi = features(x, h)
    w = post.mu + np.sqrt(post.sigma_sq) * rng.standard_normal((1_000_000, 6))
    assert query(x, post, h).prob == pytest.approx(expit(w @ phi).mean(), abs=0.01)


def test_single_positive_at_hinge_moves_up():
    h = spaced_hinges(3)
    post = learn_params(init_posterior(3), (np.repeat(h.points[1:2], 5, axis=0), np.ones(5, int)), h)
    assert post.mu[1] > 0
    assert query(h.points[1], post, h).prob > 0.5
    assert post.mu[0] == 0 and post.mu[2] == 0


def test_jj_matches_quadrature_on_orthogonal_instances():
    worst = 0.0
    for seed in range(12):
        hinges, pts, ys, counts = random_orthogonal_instance(np.random.default_rng(seed))
        post = learn_params(init_posterior(hinges.m), (pts, ys), hinges, tol=1e-10, max_iters=1000)
        for j, (n1, n0) in enumerate(counts):
            m, sd = logistic_posterior_1d(n1, n0, 1e4)
            worst = max(worst, abs(post.mu[j] - m), abs(math.sqrt(post.sigma_sq[j]) - sd))
    assert worst < 1e-2


@pytest.mark.xfail(strict=True, reason="local bound is loose with ten same-label samples under a 1e4 prior")
def test_two_parameter_all_positive_example():
    h = HingeSet(np.zeros((1, 3)), gamma=1.0, bias=True)
    post = learn_params(init_posterior(1, 1e4, bias=True), (np.zeros((10, 3)), np.ones(10, int)), h,
                        tol=1e-10, max_iters=10_000)
    mean, std = logistic_posterior_2d([1.0] * 10, [1] * 10, 1e4, 500.0)
    np.testing.assert_allclose(post.mu, mean, atol=1e-2)
    np.testing.assert_allclose(np.sqrt(post.sigma_sq), std, atol=1e-2)


def test_empty_effect():
    h = spaced_hinges(4)
    prior = WeightPosterior(np.array([0.3, -0.2, 1.0, 0.0]), np.array([2.0, 3.0, 4.0, 5.0]))
    far = np.full((7, 3), 1e4)
    post = learn_params(prior, (far, np.array([1, 0, 1, 1, 0, 1, 0])), h)
    np.testing.assert_allclose(post.mu, prior.mu, atol=1e-9)
    np.testing.assert_array_equal(post.sigma_sq, prior.sigma_sq)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_variance_never_grows(seed):
    rng = np.random.default_rng(seed)
    h = HingeSet(rng.uniform(0, 3, (int(rng.integers(2, 11)), 3)), gamma=1.0)
    post = init_posterior(h.m, float(rng.choice([1.0, 1e2, 1e4])))
    for _ in range(5):
        n = int(rng.integers(1, 30))
        before = post.sigma_sq.copy()
        post = learn_params(post, (rng.uniform(0, 3, (n, 3)), rng.integers(0, 2, n)), h)
        assert np.all(post.sigma_sq <= before)
        assert np.all(post.sigma_sq > 0)


@pytest.mark.parametrize("label", [0, 1])
def test_evidence_consistency(env, label):
    h = HingeSet.lattice(env.bounds, (7, 7, 5))
    rng = np.random.default_rng(label)
    c = env.bounds.center
    pts = c + rng.uniform(-0.5, 0.5, (40, 3))
    post = learn_params(init_posterior(h.m), (pts, np.full(40, label)), h)
    _, _, prob = query_points(pts, post, h)
    assert np.all(prob > 0.5) if label else np.all(prob < 0.5)


def test_sequential_chaining_close_to_joint():
    for seed in range(6):
        rng = np.random.default_rng(100 + seed)
        hinges, pts, ys, counts = random_orthogonal_instance(rng)
        order = rng.permutation(len(ys))
        half = order[: len(ys) // 2], order[len(ys) // 2 :]
        prior = init_posterior(hinges.m)
        joint = learn_params(prior, (pts, ys), hinges, tol=1e-10, max_iters=1000)
        chained = prior
        for part in half:
            chained = learn_params(chained, (pts[part], ys[part]), hinges, tol=1e-10, max_iters=1000)
        _, _, pj = query_points(hinges.points, joint, hinges)
        _, _, pc = query_points(hinges.points, chained, hinges)
        assert np.max(np.abs(pj - pc)) < 0.05
        exact = []
        for n1, n0 in counts:
            m, sd = logistic_posterior_1d(n1, n0, 1e4)
            exact.append(moderated_sigmoid(m, sd))
        assert np.max(np.abs(pc - np.array(exact))) < 0.05


def test_bad_batches_rejected():
    h = spaced_hinges(2)
    with pytest.raises(ValueError):
        learn_params(init_posterior(2), (np.zeros((0, 3)), np.zeros(0)), h)
    with pytest.raises(ValueError):
        learn_params(init_posterior(3), (np.zeros((1, 3)), np.ones(1)), h)
    with pytest.raises(ValueError):
        learn_params(init_posterior(2), (np.zeros((1, 3)), np.array([2])), h)


def test_grid_round_trip_and_cell_values(env, tmp_path):
    h = HingeSet.lattice(env.bounds, (7, 7, 5))
    rng = np.random.default_rng(2)
    pts = rng.uniform(env.bounds.lo, env.bounds.hi, (300, 3))
    post = learn_params(init_posterior(h.m), (pts, env.occupied(pts).astype(int)), h)
    grid = export_grid(post, h, env.bounds, 0.5)
    grid.save(tmp_path / "occ")
    again = Grid3.load(tmp_path / "occ.json")
    assert np.array_equal(again.values, grid.values)
    assert again.values.shape == lattice_shape(env.bounds, 0.5)
    centers = grid.centers()
    for i in rng.integers(0, len(centers), 10):
        assert grid.values.ravel()[i] == pytest.approx(query(centers[i], post, h).prob, rel=1e-12)
    # x varies fastest in the flattened order
    assert centers[1, 0] - centers[0, 0] == pytest.approx(0.5)
    assert centers[1, 1] == centers[0, 1]


def test_grid_peak_near_sensed_target():
    from conftest import flat_env

    env = flat_env(rows=17, cols=17, spacing=0.5, depth=6.0, targets=[((5.0, 3.0, -3.0), 0.8)])
    h = HingeSet.lattice(env.bounds, (9, 9, 7))
    rng = np.random.default_rng(0)
    free = rng.uniform(env.bounds.lo, env.bounds.hi, (3000, 3))
    free = free[~env.occupied(free)]
    pts = np.concatenate([env.target_points, free])
    ys = np.concatenate([np.ones(len(env.target_points), int), np.zeros(len(free), int)])
    post = learn_params(init_posterior(h.m), (pts, ys), h)
    grid = export_grid(post, h, env.bounds, 0.5)
    peak = grid.centers()[int(np.argmax(grid.values))]
    centroid = env.target_points.mean(axis=0)
    assert np.all(np.abs(peak - centroid) <= 0.5 + 0.25)


def test_query_outputs_finite_and_open_interval(env):
    h = HingeSet.lattice(env.bounds, (7, 7, 5))
    rng = np.random.default_rng(9)
    post = WeightPosterior(rng.normal(0, 50, h.m), rng.uniform(1e-6, 1e3, h.m))
    mean, std, prob = query_points(rng.uniform(env.bounds.lo, env.bounds.hi, (500, 3)), post, h)
    assert np.all(np.isfinite(mean)) and np.all(std >= 0)
    assert np.all((prob > 0) & (prob < 1))
