import numpy as np
import pytest

from cloudclass.kernels import ball_query, fps, gather_group, knn, three_nn_weights

import oracles


def test_fps_square_diagonal():
    square = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    assert fps(square, 2).tolist() == [0, 3]


def test_fps_all_points():
    pts = np.random.default_rng(1).normal(size=(20, 3))
    out = fps(pts, 20, start_index=5)
    assert out[0] == 5
    assert sorted(out.tolist()) == list(range(20))


def test_fps_duplicates_never_repeat():
    pts = np.zeros((6, 3))
    assert fps(pts, 6).tolist() == [0, 1, 2, 3, 4, 5]


def test_fps_errors():
    with pytest.raises(ValueError):
        fps(np.zeros((3, 3)), 4)


@pytest.mark.parametrize("seed", range(10))
def test_fps_matches_oracle(seed):
    pts = np.random.default_rng(seed).normal(size=(64, 3))
    np.testing.assert_array_equal(fps(pts, 8), oracles.fps(pts, 8))


def test_fps_monotone_and_covering():
    pts = np.random.default_rng(5).uniform(size=(80, 3))
    order = fps(pts, 12)
    dists = oracles.fps_selection_distances(pts, order)
    assert all(a >= b for a, b in zip(dists, dists[1:]))
    d = oracles.dist_matrix(pts, pts[order])
    assert d.min(axis=1).max() <= dists[-1]


def test_ball_query_colinear():
    src = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
    out = ball_query(src, src[:1], 1.5, 3)
    assert out.tolist() == [[0, 1, 0]]


def test_ball_query_infinite_radius():
    src = np.random.default_rng(2).normal(size=(15, 3))
    center = np.zeros((1, 3))
    out = ball_query(src, center, 1e9, 15)
    expect = np.argsort((src ** 2).sum(axis=1), kind="stable")
    np.testing.assert_array_equal(out[0], expect)


def test_ball_query_empty_ball_uses_nearest():
    src = np.array([[5.0, 0, 0], [3.0, 0, 0]])
    assert ball_query(src, np.zeros((1, 3)), 0.1, 2).tolist() == [[1, 1]]


@pytest.mark.parametrize("seed", range(10))
def test_ball_query_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    src = rng.uniform(-1, 1, size=(60, 3))
    centers = src[rng.choice(60, 10, replace=False)] + rng.normal(0, 0.05, (10, 3))
    r, k = rng.uniform(0.2, 0.8), int(rng.integers(1, 20))
    np.testing.assert_array_equal(ball_query(src, centers, r, k), oracles.ball_query(src, centers, r, k))


def test_ball_query_subset_of_knn():
    rng = np.random.default_rng(9)
    src = rng.uniform(-1, 1, size=(100, 3))
    centers = rng.uniform(-1, 1, size=(20, 3))
    bq = ball_query(src, centers, 0.5, 16)
    nn = knn(src, centers, 16)
    for i in range(20):
        inside = {j for j in nn[i] if ((src[j] - centers[i]) ** 2).sum() <= 0.25}
        hits = {j for j in bq[i] if ((src[j] - centers[i]) ** 2).sum() <= 0.25}
        assert hits <= inside


def test_ball_query_batched():
    rng = np.random.default_rng(3)
    src = rng.normal(size=(2, 30, 3))
    centers = src[:, :5]
    out = ball_query(src, centers, 0.7, 6)
    for b in range(2):
        np.testing.assert_array_equal(out[b], oracles.ball_query(src[b], centers[b], 0.7, 6))


def test_knn_self_first():
    src = np.random.default_rng(4).normal(size=(10, 3))
    idx, d = knn(src, src[3:4], 2, return_distances=True)
    assert idx[0, 0] == 3 and d[0, 0] == 0.0


def test_knn_full_order():
    src = np.random.default_rng(4).normal(size=(10, 3))
    q = np.zeros((1, 3))
    np.testing.assert_array_equal(knn(src, q, 10)[0], np.argsort((src ** 2).sum(1), kind="stable"))


def test_knn_ties_by_index():
    src = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, 0, 3.0]])
    assert knn(src, np.zeros((1, 3)), 3).tolist() == [[0, 1, 2]]


def test_knn_errors():
    with pytest.raises(ValueError):
        knn(np.zeros((3, 3)), np.zeros((1, 3)), 4)
    with pytest.raises(ValueError):
        knn(np.zeros((3, 3)), np.zeros((3, 3)), 3, exclude_self=True)


def test_knn_exclude_self_with_duplicates():
    pts = np.zeros((4, 3))
    assert knn(pts, pts, 1, exclude_self=True)[:, 0].tolist() == [1, 0, 0, 0]


@pytest.mark.parametrize("seed", range(5))
def test_knn_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(50, 5))
    q = rng.normal(size=(7, 5))
    np.testing.assert_array_equal(knn(src, q, 9), oracles.knn(src, q, 9))
    np.testing.assert_array_equal(knn(src, src, 4, exclude_self=True), oracles.knn(src, src, 4, exclude_self=True))


def test_three_nn_coincident():
    sparse = np.random.default_rng(0).normal(size=(10, 3))
    idx, w = three_nn_weights(sparse, sparse[4:5])
    assert idx[0, 0] == 4 and w[0, 0] >= 1 - 1e-6


def test_three_nn_equidistant():
    sparse = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [5, 5, 5]])
    _, w = three_nn_weights(sparse, np.zeros((1, 3)))
    np.testing.assert_allclose(w, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-12)


def test_three_nn_fewer_than_three():
    idx, w = three_nn_weights(np.ones((1, 3)), np.zeros((4, 3)))
    assert idx.shape == (4, 1)
    np.testing.assert_array_equal(w, np.ones((4, 1)))
    with pytest.raises(ValueError):
        three_nn_weights(np.zeros((0, 3)), np.zeros((1, 3)))


def test_three_nn_matches_oracle_and_sums_to_one():
    rng = np.random.default_rng(11)
    sparse, dense = rng.normal(size=(20, 3)), rng.normal(size=(40, 3))
    idx, w = three_nn_weights(sparse, dense)
    oi, ow = oracles.three_nn(sparse, dense)
    np.testing.assert_array_equal(idx, oi)
    np.testing.assert_allclose(w, ow, rtol=1e-12)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)


def test_gather_group_identity():
    feats = np.random.default_rng(0).normal(size=(2, 5, 4))
    table = np.tile(np.arange(5)[None, :, None], (2, 1, 1))
    out = gather_group(feats, table, relative=False)
    np.testing.assert_array_equal(out[:, :, 0], feats)


def test_gather_group_relative_self_is_zero():
    feats = np.random.default_rng(0).normal(size=(1, 5, 4))
    table = np.arange(5).reshape(1, 5, 1)
    out = gather_group(feats, table, feats, relative=True)
    np.testing.assert_array_equal(out[..., :3], 0.0)
    np.testing.assert_array_equal(out[0, :, 0, 3], feats[0, :, 3])


def test_gather_group_matches_oracle():
    rng = np.random.default_rng(8)
    feats = rng.normal(size=(2, 12, 5))
    table = rng.integers(0, 12, size=(2, 4, 3))
    centers = rng.normal(size=(2, 4, 3))
    np.testing.assert_array_equal(gather_group(feats, table, centers), oracles.gather_group(feats, table, centers, True))
    with pytest.raises(IndexError):
        gather_group(feats, table + 12, centers)
