"""PointNet, PointNet++ and DGCNN classifiers, plus their background-aware (BGA) variants.

A BGA model predicts a class and a per-point foreground/background mask. The
feature that enters the last classification layer is handed to the
segmentation branch, so the mask prediction is driven by the classifier.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .core import ValidationError, derive_seed
from .kernels import ball_query, fps_batch, gather_group, knn, three_nn_weights

__all__ = [
    "VARIANTS",
    "SALevelConfig",
    "FPLevelConfig",
    "BGAConfig",
    "default_config",
    "desk_config",
    "tiny_config",
    "Model",
    "ModelOutput",
    "build_model",
    "joint_loss",
    "set_abstraction",
    "feature_propagation",
    "edgeconv",
    "ParamStore",
    "apply_dense",
]

VARIANTS = ("BGA_PNPP", "BGA_DGCNN", "PNPP_VANILLA", "POINTNET_VANILLA", "DGCNN_VANILLA")
BGA_VARIANTS = ("BGA_PNPP", "BGA_DGCNN")


@dataclass
class SALevelConfig:
    """One set abstraction level. ``num_centroids=None`` groups the whole cloud (global pooling)."""

    num_centroids: int | None
    radius: float | None
    k: int | None
    widths: list[int]

    @property
    def is_global(self) -> bool:
        return self.num_centroids is None


@dataclass
class FPLevelConfig:
    """MLP widths of the three propagation stages, coarsest first; the last stage ends in 2 logits."""

    stages: list[list[int]]


@dataclass
class BGAConfig:
    variant: str = "BGA_PNPP"
    num_points: int = 1024
    num_classes: int = 15
    encoder: list[SALevelConfig] = field(default_factory=list)
    head: list[int] = field(default_factory=lambda: [512, 256, 15])
    seg: FPLevelConfig = field(default_factory=lambda: FPLevelConfig([[256, 256], [256, 128], [128, 128, 2]]))
    lam: float = 0.5
    dropout_p: float = 0.5
    edgeconv_k: int = 20
    edgeconv_widths: list[int] = field(default_factory=lambda: [64, 64, 128, 256])
    edgeconv_emb: int = 1024
    dgcnn_seg_widths: list[int] = field(default_factory=lambda: [256, 128, 2])
    pointnet_widths: list[int] = field(default_factory=lambda: [64, 64, 64, 128, 1024])

    def validate(self) -> "BGAConfig":
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown model variant {self.variant!r}")
        if self.lam < 0:
            raise ValidationError("lambda must be non-negative")
        if not 0 <= self.dropout_p < 1:
            raise ValidationError("dropout_p must lie in [0, 1)")
        if len(self.head) != 3 or self.head[-1] != self.num_classes:
            raise ValidationError(f"head must have 3 FC widths ending in num_classes={self.num_classes}")
        if self.variant in ("BGA_PNPP", "PNPP_VANILLA"):
            if len(self.encoder) != 3 or not self.encoder[-1].is_global:
                raise ValidationError("encoder must have 3 set abstraction levels, the last one global")
            counts = [self.num_points] + [lv.num_centroids for lv in self.encoder[:-1]]
            if any(c is None for c in counts) or any(b >= a for a, b in zip(counts, counts[1:])):
                raise ValidationError(f"set abstraction centroid counts must decrease: {counts}")
            for lv in self.encoder[:-1]:
                if lv.radius is None or lv.radius <= 0 or lv.k is None or lv.k < 1:
                    raise ValidationError("local set abstraction levels need radius > 0 and k >= 1")
        if self.variant == "BGA_PNPP":
            if len(self.seg.stages) != 3 or self.seg.stages[-1][-1] != 2:
                raise ValidationError("segmentation branch needs 3 stages ending in 2 channels")
        if self.variant == "BGA_DGCNN" and self.dgcnn_seg_widths[-1] != 2:
            raise ValidationError("DGCNN segmentation MLP must end in 2 channels")
        if self.variant in ("BGA_DGCNN", "DGCNN_VANILLA") and not 1 <= self.edgeconv_k < self.num_points:
            raise ValidationError("edgeconv_k must satisfy 1 <= k < num_points")
        return self

    @property
    def is_bga(self) -> bool:
        return self.variant in BGA_VARIANTS

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "BGAConfig":
        d = dict(d)
        if "encoder" in d:
            d["encoder"] = [SALevelConfig(**lv) for lv in d["encoder"]]
        if "seg" in d:
            d["seg"] = FPLevelConfig(**d["seg"])
        return cls(**d).validate()

    @classmethod
    def from_json(cls, text: str) -> "BGAConfig":
        return cls.from_dict(json.loads(text))


def default_config(variant: str = "BGA_PNPP", num_classes: int = 15, num_points: int = 1024) -> BGAConfig:
    return BGAConfig(
        variant=variant,
        num_points=num_points,
        num_classes=num_classes,
        encoder=[
            SALevelConfig(512, 0.2, 32, [64, 64, 128]),
            SALevelConfig(128, 0.4, 64, [128, 128, 256]),
            SALevelConfig(None, None, None, [256, 512, 1024]),
        ],
        head=[512, 256, num_classes],
    ).validate()


def desk_config(variant: str = "BGA_PNPP", num_classes: int = 4, num_points: int = 256) -> BGAConfig:
    """Widths divided by four and centroid counts scaled to ``num_points``."""
    return BGAConfig(
        variant=variant,
        num_points=num_points,
        num_classes=num_classes,
        encoder=[
            SALevelConfig(num_points // 2, 0.2, 16, [16, 16, 32]),
            SALevelConfig(num_points // 8, 0.4, 32, [32, 32, 64]),
            SALevelConfig(None, None, None, [64, 128, 256]),
        ],
        head=[128, 64, num_classes],
        seg=FPLevelConfig([[64, 64], [64, 32], [32, 32, 2]]),
        edgeconv_k=16,
        edgeconv_widths=[16, 16, 32, 64],
        edgeconv_emb=256,
        dgcnn_seg_widths=[64, 32, 2],
        pointnet_widths=[16, 16, 16, 32, 256],
    ).validate()


def tiny_config(variant: str = "BGA_PNPP", num_classes: int = 3, num_points: int = 64) -> BGAConfig:
    """Reduced configuration (64 points, widths <= 16) for gradient checks."""
    return BGAConfig(
        variant=variant,
        num_points=num_points,
        num_classes=num_classes,
        encoder=[
            SALevelConfig(num_points // 2, 0.4, 8, [8, 8, 16]),
            SALevelConfig(num_points // 8, 0.8, 8, [16, 16]),
            SALevelConfig(None, None, None, [16, 16]),
        ],
        head=[16, 8, num_classes],
        seg=FPLevelConfig([[16], [16, 8], [8, 2]]),
        dropout_p=0.5,
        edgeconv_k=6,
        edgeconv_widths=[8, 8, 16],
        edgeconv_emb=16,
        dgcnn_seg_widths=[16, 2],
        pointnet_widths=[8, 16],
    ).validate()


class ModelOutput(NamedTuple):
    class_logits: Tensor
    mask_logits: Tensor | None
    global_feature: Tensor
    penultimate: Tensor


# -- building blocks -----------------------------------------------------------------


class ParamStore:
    """Owns the named parameters and batch-norm buffers of a model."""

    def __init__(self, seed: int, dtype):
        self.seed = seed
        self.dtype = dtype
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        p = Parameter(name, Tensor(value.astype(self.dtype)))
        self.params[name] = p
        return p.tensor

    def dense(self, name: str, fan_in: int, fan_out: int, norm: bool = True) -> None:
        bound = 1.0 / np.sqrt(fan_in)
        rng = np.random.Generator(np.random.PCG64(derive_seed(self.seed, "init", name)))
        self._add(f"{name}.W", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self._add(f"{name}.b", np.zeros(fan_out))
        if norm:
            self._add(f"{name}.gamma", np.ones(fan_out))
            self._add(f"{name}.beta", np.zeros(fan_out))
            self.buffers[f"{name}.running_mean"] = np.zeros(fan_out, dtype=self.dtype)
            self.buffers[f"{name}.running_var"] = np.ones(fan_out, dtype=self.dtype)

    def mlp(self, name: str, fan_in: int, widths, final_linear: bool = False) -> int:
        for i, w in enumerate(widths):
            last = final_linear and i == len(widths) - 1
            self.dense(f"{name}.{i}", fan_in, w, norm=not last)
            fan_in = w
        return fan_in


def apply_dense(reg: ParamStore, name: str, x: Tensor, training: bool) -> Tensor:
    """matmul -> bias -> batch norm -> ReLU, or a plain affine map for unnormalized layers."""
    p = reg.params
    x = ad.bias_add(ad.matmul(x, p[f"{name}.W"].tensor), p[f"{name}.b"].tensor)
    if f"{name}.gamma" not in p:
        return x
    x = ad.batch_norm(x, p[f"{name}.gamma"].tensor, p[f"{name}.beta"].tensor,
                      reg.buffers[f"{name}.running_mean"], reg.buffers[f"{name}.running_var"], training)
    return ad.relu(x)


def apply_mlp(reg: ParamStore, name: str, x: Tensor, depth: int, training: bool) -> Tensor:
    for i in range(depth):
        x = apply_dense(reg, f"{name}.{i}", x, training)
    return x


def set_abstraction(reg: ParamStore, name: str, xyz: np.ndarray, feats: Tensor | None, cfg: SALevelConfig,
                    training: bool):
    """Sample centroids, group neighbors, run the shared MLP and max-pool each group.

    Returns ``(new_xyz, new_feats)`` with shapes ``(B, M, 3)`` and ``(B, M, F')``.
    """
    b, n, _ = xyz.shape
    if feats is not None and feats.shape[:2] != (b, n):
        raise ValueError(f"feature shape {feats.shape} does not match points {xyz.shape}")
    if cfg.is_global:
        new_xyz = np.zeros((b, 1, 3), dtype=xyz.dtype)
        grouped = Tensor(xyz[:, None])
        if feats is not None:
            grouped = ad.concat([grouped, ad.reshape(feats, (b, 1, n, feats.shape[-1]))], axis=-1)
    else:
        if n < cfg.num_centroids:
            raise ValueError(f"cannot pick {cfg.num_centroids} centroids from {n} points")
        centers = fps_batch(xyz, cfg.num_centroids)
        new_xyz = np.take_along_axis(xyz, centers[..., None], axis=1)
        table = ball_query(xyz, new_xyz, cfg.radius, cfg.k)
        grouped = Tensor(gather_group(xyz, table, new_xyz, relative=True))
        if feats is not None:
            grouped = ad.concat([grouped, ad.gather(feats, table)], axis=-1)
    h = apply_mlp(reg, name, grouped, len(cfg.widths), training)
    pooled, _ = ad.max_reduce(h, axis=2)
    return new_xyz, pooled


def interpolate(sparse_xyz: np.ndarray, dense_xyz: np.ndarray, sparse_feats: Tensor) -> Tensor:
    """Inverse-squared-distance interpolation of sparse features onto dense points."""
    idx, w = three_nn_weights(sparse_xyz, dense_xyz)
    picked = ad.gather(sparse_feats, idx)
    return ad.sum_(ad.mul(picked, Tensor(w[..., None].astype(sparse_feats.dtype))), axis=2)


def feature_propagation(reg: ParamStore, name: str, dense_xyz: np.ndarray, sparse_xyz: np.ndarray,
                        dense_feats: Tensor | None, sparse_feats: Tensor, widths, training: bool) -> Tensor:
    x = interpolate(sparse_xyz, dense_xyz, sparse_feats)
    if dense_feats is not None:
        x = ad.concat([x, dense_feats], axis=-1)
    return apply_mlp(reg, name, x, len(widths), training)


def edgeconv(reg: ParamStore, name: str, feats: Tensor, k: int, training: bool) -> Tensor:
    """Edge convolution on the kNN graph of the current features (self excluded)."""
    b, n, f = feats.shape
    if not 1 <= k < n:
        raise ValueError(f"edgeconv needs 1 <= k < N, got k={k}, N={n}")
    idx = knn(feats.data, feats.data, k, exclude_self=True)
    ad.log_branch(idx)
    neighbors = ad.gather(feats, idx)
    centers = ad.expand(ad.reshape(feats, (b, n, 1, f)), (b, n, k, f))
    edges = ad.concat([centers, ad.sub(neighbors, centers)], axis=-1)
    h = apply_dense(reg, name, edges, training)
    pooled, _ = ad.max_reduce(h, axis=2)
    return pooled


# -- models -------------------------------------------------------------------------------


class Model:
    """A classifier, optionally with a background-aware segmentation branch."""

    def __init__(self, cfg: BGAConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg.validate()
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.reg = ParamStore(seed, self.dtype)
        self._build()

    # construction

    def _build(self):
        cfg, reg = self.cfg, self.reg
        v = cfg.variant
        if v in ("BGA_PNPP", "PNPP_VANILLA"):
            fan_in = 0
            self._level_dims = []
            for i, lv in enumerate(cfg.encoder, start=1):
                fan_in = reg.mlp(f"sa{i}", fan_in + 3, lv.widths)
                self._level_dims.append(fan_in)
            global_dim = fan_in
        elif v in ("BGA_DGCNN", "DGCNN_VANILLA"):
            fan_in, total = 3, 0
            for i, w in enumerate(cfg.edgeconv_widths, start=1):
                reg.dense(f"ec{i}", 2 * fan_in, w)
                fan_in = w
                total += w
            reg.dense("emb", total, cfg.edgeconv_emb)
            self._pointwise_dim = total
            global_dim = cfg.edgeconv_emb
        else:
            global_dim = reg.mlp("pn", 3, cfg.pointnet_widths)
        reg.dense("head.fc1", global_dim, cfg.head[0])
        reg.dense("head.fc2", cfg.head[0], cfg.head[1])
        reg.dense("head.fc3", cfg.head[1], cfg.head[2], norm=False)
        penult = cfg.head[1]
        if v == "BGA_PNPP":
            stages = cfg.seg.stages
            d2, d1 = self._level_dims[1], self._level_dims[0]
            dim = reg.mlp("fp3", penult + d2, stages[0])
            dim = reg.mlp("fp2", dim + d1, stages[1])
            reg.mlp("fp1", dim + 3, stages[2], final_linear=True)
        elif v == "BGA_DGCNN":
            reg.mlp("seg", self._pointwise_dim + penult, cfg.dgcnn_seg_widths, final_linear=True)

    # parameter access

    @property
    def params(self) -> dict[str, Parameter]:
        return self.reg.params

    def parameters(self) -> list[Parameter]:
        return list(self.reg.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.reg.params.values())

    def zero_grad(self):
        for p in self.reg.params.values():
            p.tensor.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters followed by batch-norm buffers, in construction order."""
        out = {name: p.data for name, p in self.reg.params.items()}
        out.update(self.reg.buffers)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.reg.params) | set(self.reg.buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValidationError(f"checkpoint does not match model: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, value in state.items():
            target = self.reg.params[name].data if name in self.reg.params else self.reg.buffers[name]
            if target.shape != np.shape(value):
                raise ValidationError(f"shape mismatch for {name!r}: {np.shape(value)} vs {target.shape}")
            if name in self.reg.params:
                self.reg.params[name].tensor.data = np.asarray(value, dtype=self.dtype).copy()
            else:
                self.reg.buffers[name] = np.asarray(value, dtype=self.dtype).copy()

    # forward

    def forward(self, points, training: bool = False, seed: int = 0, penultimate_override=None) -> ModelOutput:
        """Run the network on a ``(B, N, 3)`` batch.

        ``seed`` drives dropout in training mode. ``penultimate_override`` replaces the
        classification feature handed to the segmentation branch (used to probe the wiring).
        """
        cfg, reg = self.cfg, self.reg
        xyz = np.ascontiguousarray(points, dtype=self.dtype)
        if xyz.ndim != 3 or xyz.shape[1:] != (cfg.num_points, 3):
            raise ValidationError(f"expected input (B, {cfg.num_points}, 3), got {xyz.shape}")
        v = cfg.variant
        if v in ("BGA_PNPP", "PNPP_VANILLA"):
            levels = [(xyz, None)]
            feats = None
            cur = xyz
            for i, lv in enumerate(cfg.encoder, start=1):
                cur, feats = set_abstraction(reg, f"sa{i}", cur, feats, lv, training)
                levels.append((cur, feats))
            global_feature = ad.reshape(feats, (xyz.shape[0], feats.shape[-1]))
        elif v in ("BGA_DGCNN", "DGCNN_VANILLA"):
            x = Tensor(xyz)
            outs = []
            for i in range(1, len(cfg.edgeconv_widths) + 1):
                x = edgeconv(reg, f"ec{i}", x, cfg.edgeconv_k, training)
                outs.append(x)
            pointwise = ad.concat(outs, axis=-1)
            emb = apply_dense(reg, "emb", pointwise, training)
            global_feature, _ = ad.max_reduce(emb, axis=1)
        else:
            h = apply_mlp(reg, "pn", Tensor(xyz), len(cfg.pointnet_widths), training)
            global_feature, _ = ad.max_reduce(h, axis=1)

        h = apply_dense(reg, "head.fc1", global_feature, training)
        h = ad.dropout(h, cfg.dropout_p, derive_seed(seed, "dropout", "fc1"), training)
        h = apply_dense(reg, "head.fc2", h, training)
        penultimate = ad.dropout(h, cfg.dropout_p, derive_seed(seed, "dropout", "fc2"), training)
        class_logits = apply_dense(reg, "head.fc3", penultimate, training)

        mask_logits = None
        if cfg.is_bga:
            seed_feat = penultimate
            if penultimate_override is not None:
                seed_feat = Tensor(np.asarray(penultimate_override, dtype=self.dtype))
            b = xyz.shape[0]
            if v == "BGA_PNPP":
                (l0, _), (l1, f1), (l2, f2), (l3, _) = levels
                coarse = ad.reshape(seed_feat, (b, 1, seed_feat.shape[-1]))
                x = feature_propagation(reg, "fp3", l2, l3, f2, coarse, cfg.seg.stages[0], training)
                x = feature_propagation(reg, "fp2", l1, l2, f1, x, cfg.seg.stages[1], training)
                mask_logits = feature_propagation(reg, "fp1", l0, l1, Tensor(l0), x, cfg.seg.stages[2], training)
            else:
                n = cfg.num_points
                attached = ad.expand(ad.reshape(seed_feat, (b, 1, seed_feat.shape[-1])), (b, n, seed_feat.shape[-1]))
                x = ad.concat([pointwise, attached], axis=-1)
                mask_logits = apply_mlp(reg, "seg", x, len(cfg.dgcnn_seg_widths), training)
        return ModelOutput(class_logits, mask_logits, global_feature, penultimate)

    __call__ = forward


def build_model(cfg: BGAConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Deterministically initialized model: fan-in uniform weights, zero biases, unit/zero batch-norm affine."""
    return Model(cfg, seed=seed, dtype=dtype)


def joint_loss(class_logits: Tensor, labels, mask_logits: Tensor | None, masks, lam: float):
    """``(L_total, L_class, L_seg)`` with ``L_total = L_class + lam * L_seg``.

    Without a mask branch ``L_seg`` is ``None`` and ``L_total`` is ``L_class``.
    """
    l_class = ad.softmax_cross_entropy(class_logits, labels)
    if mask_logits is None:
        return l_class, l_class, None
    l_seg = ad.softmax_cross_entropy(mask_logits, np.asarray(masks, dtype=np.int64))
    return ad.add(l_class, ad.mul(l_seg, lam)), l_class, l_seg
