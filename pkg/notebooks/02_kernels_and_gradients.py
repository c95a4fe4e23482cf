# %% [markdown]
# # Neighborhood kernels and gradient checking
#
# The point kernels are plain numpy and deterministic: ties always go to the
# smallest index. The autodiff tape is verified against central differences.

# %%
import numpy as np

from cloudclass import autodiff as ad
from cloudclass.kernels import ball_query, fps, knn, three_nn_weights

rng = np.random.default_rng(0)
cloud = rng.uniform(-1, 1, size=(512, 3))

# %% [markdown]
# Farthest point sampling picks well spread centroids, starting from point 0.

# %%
centers_idx = fps(cloud, 32)
centers = cloud[centers_idx]
print("first centroids:", centers_idx[:8])
gap = np.sqrt(((centers[:, None] - centers[None]) ** 2).sum(-1) + np.eye(32) * 1e9).min()
print(f"closest pair of centroids: {gap:.3f}")

# %% [markdown]
# Ball query returns up to k neighbors within the radius, nearest first, padding
# short groups by repeating the first hit. kNN is the unbounded version.

# %%
groups = ball_query(cloud, centers, radius=0.3, k=16)
print("ball query table", groups.shape, "unique per group (first 5):",
      [len(np.unique(g)) for g in groups[:5]])
nbrs = knn(cloud, cloud, k=5, exclude_self=True)
print("5 nearest neighbors of points 0..3:\n", nbrs[:4])

# %% [markdown]
# Feature propagation interpolates from sparse to dense points with inverse squared
# distance weights over the three nearest sparse points.

# %%
idx, w = three_nn_weights(centers, cloud)
print("weights sum to one:", np.allclose(w.sum(-1), 1.0))

# %% [markdown]
# A small network on the tape: dense layer, ReLU, max over points, cross entropy.
# `grad_check` perturbs every parameter element by +/-delta and skips elements
# where the perturbation flips a ReLU or argmax decision.

# %%
x = ad.Tensor(rng.normal(size=(4, 20, 3)))
W = ad.Tensor(rng.normal(size=(3, 8)) * 0.5, requires_grad=True)
b = ad.Tensor(np.zeros(8), requires_grad=True)
V = ad.Tensor(rng.normal(size=(8, 3)) * 0.5, requires_grad=True)
labels = np.array([0, 1, 2, 1])


def loss():
    h = ad.relu(ad.bias_add(ad.matmul(x, W), b))
    pooled, _ = ad.max_reduce(h, axis=-2)
    return ad.softmax_cross_entropy(ad.matmul(pooled, V), labels)


print(ad.grad_check(loss, {"W": W, "b": b, "V": V}))
