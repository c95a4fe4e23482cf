"""Geometric kernels behind set abstraction, feature propagation and EdgeConv.

All functions are pure and deterministic. Distances are accumulated channel by
channel in a fixed order so that results are bit-reproducible, and every tie is
broken towards the smallest index.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "pairwise_sqdist",
    "fps",
    "ball_query",
    "knn",
    "three_nn_weights",
    "gather_group",
    "INTERP_EPS",
]

INTERP_EPS = 1e-8


def pairwise_sqdist(queries: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, shape ``(..., M, N)``, for ``(..., M, F)`` and ``(..., N, F)`` inputs."""
    queries = np.asarray(queries)
    sources = np.asarray(sources)
    if queries.shape[-1] != sources.shape[-1]:
        raise ValueError(f"channel mismatch: {queries.shape} vs {sources.shape}")
    out = None
    for c in range(queries.shape[-1]):
        diff = queries[..., :, None, c] - sources[..., None, :, c]
        out = diff * diff if out is None else out + diff * diff
    if out is None:
        out = np.zeros(queries.shape[:-1] + sources.shape[-2:-1])
    return out


def fps(points: np.ndarray, m: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling of ``m`` indices from an ``(N, F)`` cloud."""
    points = np.asarray(points)
    n = points.shape[0]
    if n == 0:
        raise ValueError("fps on an empty cloud")
    if not 1 <= m <= n:
        raise ValueError(f"cannot select {m} of {n} points")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range")
    selected = np.empty(m, dtype=np.int64)
    selected[0] = start_index
    mind = pairwise_sqdist(points[start_index:start_index + 1], points)[0]
    # chosen points are parked below zero so duplicates never get picked twice
    mind[start_index] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(mind))
        selected[i] = nxt
        np.minimum(mind, pairwise_sqdist(points[nxt:nxt + 1], points)[0], out=mind)
        mind[nxt] = -1.0
    return selected


def fps_batch(points: np.ndarray, m: int) -> np.ndarray:
    return np.stack([fps(p, m) for p in points])


def _k_smallest(d2: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest entries per row, ordered by (distance, index)."""
    n = d2.shape[-1]
    if k >= n:
        return np.argsort(d2, axis=-1, kind="stable")
    kth = np.partition(d2, k - 1, axis=-1)[..., k - 1:k]
    below = d2 < kth
    at = d2 == kth
    # among entries tied with the k-th value keep the lowest indices
    room = k - below.sum(axis=-1, keepdims=True)
    take = below | (at & (np.cumsum(at, axis=-1) <= room))
    idx = np.nonzero(take)[-1].reshape(d2.shape[:-1] + (k,))
    order = np.argsort(np.take_along_axis(d2, idx, axis=-1), axis=-1, kind="stable")
    return np.take_along_axis(idx, order, axis=-1)


def ball_query(sources: np.ndarray, centers: np.ndarray, radius: float, k: int) -> np.ndarray:
    """Up to ``k`` neighbors within ``radius`` of each center, nearest first.

    Accepts ``(N, 3)``/``(M, 3)`` or batched ``(B, N, 3)``/``(B, M, 3)`` arrays and
    returns integer indices of shape ``(..., M, k)``. Short rows are padded by
    repeating their first (nearest) hit; a center with no hit gets its nearest
    source repeated.
    """
    sources = np.asarray(sources)
    centers = np.asarray(centers)
    if sources.shape[-2] == 0:
        raise ValueError("ball_query with no sources")
    if radius <= 0 or k < 1:
        raise ValueError("radius must be positive and k >= 1")
    d2 = pairwise_sqdist(centers, sources)
    kk = min(k, d2.shape[-1])
    idx = _k_smallest(d2, kk)
    dist = np.take_along_axis(d2, idx, axis=-1)
    inside = dist <= radius * radius
    # the nearest source always fills empty rows
    first = idx[..., :1]
    idx = np.where(inside, idx, first)
    if kk < k:
        pad = np.broadcast_to(first, idx.shape[:-1] + (k - kk,))
        idx = np.concatenate([idx, pad], axis=-1)
    return idx.astype(np.int64)


def knn(sources: np.ndarray, queries: np.ndarray, k: int, *, exclude_self: bool = False,
        return_distances: bool = False):
    """Exact ``k`` nearest sources for each query, ascending, ties by index.

    With ``exclude_self`` the queries must be the sources themselves and each
    point's own index is never returned.
    """
    sources = np.asarray(sources)
    queries = np.asarray(queries)
    n = sources.shape[-2]
    limit = n - 1 if exclude_self else n
    if not 1 <= k <= limit:
        raise ValueError(f"k={k} exceeds the {limit} available neighbors")
    d2 = pairwise_sqdist(queries, sources)
    if exclude_self:
        if queries.shape[-2] != n:
            raise ValueError("exclude_self requires queries == sources")
        d2 = d2.copy()
        diag = np.arange(n)
        d2[..., diag, diag] = np.inf
    idx = _k_smallest(d2, k)
    if return_distances:
        return idx, np.take_along_axis(d2, idx, axis=-1)
    return idx


def three_nn_weights(sparse: np.ndarray, dense: np.ndarray):
    """Indices and inverse-squared-distance weights of the 3 nearest sparse points.

    Returns ``(idx, weights)`` with shape ``(..., M, min(3, S))``; weights sum to 1
    along the last axis.
    """
    sparse = np.asarray(sparse)
    dense = np.asarray(dense)
    s = sparse.shape[-2]
    if s == 0:
        raise ValueError("no sparse points to interpolate from")
    k = min(3, s)
    idx, d2 = knn(sparse, dense, k, return_distances=True)
    inv = 1.0 / (d2 + INTERP_EPS)
    weights = inv / inv.sum(axis=-1, keepdims=True)
    return idx, weights


def gather_group(features: np.ndarray, idx: np.ndarray, centers: np.ndarray | None = None,
                 relative: bool = True) -> np.ndarray:
    """Gather ``(B, N, F)`` features into a ``(B, M, K, F)`` block by index table.

    With ``relative`` the first three channels become neighbor minus center.
    """
    features = np.asarray(features)
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= features.shape[-2]):
        raise IndexError("neighbor index out of range")
    batch = np.arange(features.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
    out = features[batch, idx]
    if relative:
        if centers is None:
            raise ValueError("relative grouping needs centers")
        out = out.copy()
        out[..., :3] -= np.asarray(centers)[..., None, :3]
    return out
