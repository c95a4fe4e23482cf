"""Training loop, evaluation metrics and report export."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .core import (
    ClassTable,
    Manifest,
    ManifestEntry,
    ValidationError,
    VariantTag,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    derive_seed,
    raw_object_bytes,
    read_object,
    rng_for,
)
from .enrich import AugmentSpec, augment, normalize_unit, sample_to_n
from .models import BGAConfig, Model, build_model, joint_loss

__all__ = [
    "TrainConfig",
    "EpochLog",
    "Metrics",
    "Checkpoint",
    "Dataset",
    "load_dataset",
    "train",
    "predict",
    "evaluate",
    "cross_evaluate",
    "metrics_from_predictions",
    "export_report",
]

log = logging.getLogger(__name__)

SAMPLE_SEED = 0


@dataclass
class TrainConfig:
    model: BGAConfig
    variant: VariantTag = VariantTag.PB_T50_RS
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: float = 0.7
    lr_step: int = 20
    seed: int = 0
    augment: AugmentSpec | None = field(default_factory=AugmentSpec)
    lam: float | None = None
    early_stop_patience: int = 10
    early_stop_delta: float = 1e-4

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2 (batch norm)")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")

    @property
    def effective_lambda(self) -> float:
        return self.model.lam if self.lam is None else self.lam

    def learning_rate(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_step)


@dataclass
class EpochLog:
    epoch: int
    loss_total: float
    loss_class: float
    loss_seg: float | None
    train_oa: float
    wall_time: float
    steps: int


@dataclass
class Metrics:
    """Confusion matrix (rows = ground truth, cols = prediction) and derived accuracies in percent."""

    confusion: np.ndarray
    class_names: list[str]
    overall_accuracy: float
    mean_class_accuracy: float
    per_class_accuracy: list[float | None]
    mask_accuracy: float | None = None
    absent_classes: list[str] = field(default_factory=list)
    excluded: int = 0

    @property
    def num_objects(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "num_objects": self.num_objects,
            "num_classes": len(self.class_names),
            "class_names": list(self.class_names),
            "confusion": self.confusion.astype(int).tolist(),
            "overall_accuracy": self.overall_accuracy,
            "mean_class_accuracy": self.mean_class_accuracy,
            "per_class_accuracy": list(self.per_class_accuracy),
            "mask_accuracy": self.mask_accuracy,
            "absent_classes": list(self.absent_classes),
            "excluded": self.excluded,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Metrics":
        return cls(
            confusion=np.asarray(d["confusion"], dtype=np.int64).reshape(d["num_classes"], d["num_classes"]),
            class_names=list(d["class_names"]),
            overall_accuracy=d["overall_accuracy"],
            mean_class_accuracy=d["mean_class_accuracy"],
            per_class_accuracy=list(d["per_class_accuracy"]),
            mask_accuracy=d["mask_accuracy"],
            absent_classes=list(d["absent_classes"]),
            excluded=d["excluded"],
        )

    def __eq__(self, other):
        if not isinstance(other, Metrics):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def metrics_from_predictions(labels, predictions, num_classes: int, class_names: Sequence[str] | None = None,
                             mask_true=None, mask_pred=None, excluded: int = 0) -> Metrics:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
    if labels.shape != predictions.shape:
        raise ValidationError("labels and predictions differ in length")
    if labels.size == 0:
        raise ValidationError("no objects to evaluate")
    if labels.min() < 0 or labels.max() >= num_classes or predictions.min() < 0 or predictions.max() >= num_classes:
        raise ValidationError(f"class id outside [0, {num_classes})")
    names = list(class_names) if class_names is not None else ClassTable.generic(num_classes).names
    confusion = np.bincount(labels * num_classes + predictions, minlength=num_classes * num_classes)
    confusion = confusion.reshape(num_classes, num_classes)
    support = confusion.sum(axis=1)
    diag = np.diag(confusion)
    per_class = [float(100.0 * diag[c] / support[c]) if support[c] else None for c in range(num_classes)]
    present = [a for a in per_class if a is not None]
    mask_acc = None
    if mask_true is not None and mask_pred is not None:
        mt = np.asarray(mask_true).reshape(-1)
        mp = np.asarray(mask_pred).reshape(-1)
        if mt.shape != mp.shape:
            raise ValidationError("mask arrays differ in length")
        mask_acc = float(100.0 * np.count_nonzero(mt == mp) / mt.size)
    return Metrics(
        confusion=confusion,
        class_names=list(names),
        overall_accuracy=float(100.0 * diag.sum() / support.sum()),
        mean_class_accuracy=float(np.mean(present)),
        per_class_accuracy=per_class,
        mask_accuracy=mask_acc,
        absent_classes=[names[c] for c in range(num_classes) if not support[c]],
        excluded=excluded,
    )


# -- data -----------------------------------------------------------------------------


@dataclass
class Dataset:
    points: np.ndarray  # (M, n, 3) float32, normalized
    masks: np.ndarray  # (M, n) uint8
    labels: np.ndarray  # (M,)
    entries: list[ManifestEntry]

    def __len__(self):
        return len(self.labels)


def load_dataset(manifest: Manifest, root, num_points: int, split: str | None = None) -> Dataset:
    """Read, resample to ``num_points`` and normalize the objects of a manifest (optionally one split)."""
    entries = [e for e in manifest if split is None or e.split == split]
    pts = np.empty((len(entries), num_points, 3), dtype=np.float32)
    masks = np.empty((len(entries), num_points), dtype=np.uint8)
    for i, e in enumerate(entries):
        obj = read_object(Path(root) / e.path, scene_id=e.scene_id, variant=e.variant)
        if obj.class_id != e.class_id:
            raise ValidationError(f"{e.path}: file class {obj.class_id} disagrees with manifest {e.class_id}")
        p, m = sample_to_n(obj.points, obj.mask, num_points, derive_seed(SAMPLE_SEED, e.path, "sample"))
        pts[i] = normalize_unit(p)
        masks[i] = m
    labels = np.array([e.class_id for e in entries], dtype=np.int64)
    return Dataset(pts, masks, labels, entries)


# -- checkpoints ------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: BGAConfig
    state: dict[str, np.ndarray]
    class_names: list[str] | None = None

    def to_bytes(self) -> bytes:
        return checkpoint_to_bytes(self.state)

    def save(self, path) -> None:
        """Weights go to ``path`` (SOBW); the model config to ``path`` + ``.json``."""
        path = Path(path)
        path.write_bytes(self.to_bytes())
        meta = {"model": json.loads(self.config.to_json()), "class_names": self.class_names}
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path, config: BGAConfig | None = None) -> "Checkpoint":
        path = Path(path)
        state = checkpoint_from_bytes(path.read_bytes())
        names = None
        meta_path = Path(str(path) + ".json")
        if meta_path.exists():
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            names = meta.get("class_names")
            if config is None:
                config = BGAConfig.from_dict(meta["model"])
        if config is None:
            raise ValidationError(f"no model config for checkpoint {path}")
        return cls(config, state, names)

    def model(self) -> Model:
        m = build_model(self.config)
        m.load_state_dict(self.state)
        return m


# -- training ---------------------------------------------------------------------------------


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if len(chunk) >= 2:
            yield chunk


def train(manifest: Manifest, cfg: TrainConfig, root, class_names: Sequence[str] | None = None,
          dataset: Dataset | None = None):
    """Train on the manifest's train split; returns ``(Checkpoint, [EpochLog, ...])``.

    Training stops after ``cfg.epochs`` or once the best mean total loss has not
    improved by ``early_stop_delta`` for ``early_stop_patience`` epochs (0 disables).
    """
    model_cfg = cfg.model
    data = dataset if dataset is not None else load_dataset(manifest, root, model_cfg.num_points, "train")
    if len(data) == 0:
        raise ValidationError("the manifest has no training objects")
    if data.labels.max() >= model_cfg.num_classes:
        raise ValidationError(f"label {data.labels.max()} exceeds the model's {model_cfg.num_classes} classes")
    model = build_model(model_cfg, seed=cfg.seed)
    params = model.parameters()
    lam = cfg.effective_lambda
    logs: list[EpochLog] = []
    best, stale = np.inf, 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng_for(cfg.seed, "shuffle", epoch).permutation(len(data))
        lr = cfg.learning_rate(epoch)
        sums = np.zeros(3)
        seg_seen = False
        correct = seen = steps = 0
        for b, idx in enumerate(_batches(order, cfg.batch_size)):
            pts = data.points[idx]
            if cfg.augment is not None:
                pts = np.stack([augment(p, cfg.augment, derive_seed(cfg.seed, "augment", epoch, int(i)))
                                for p, i in zip(pts, idx)])
            try:
                out = model.forward(pts, training=True, seed=derive_seed(cfg.seed, "dropout", epoch, b))
                total, l_class, l_seg = joint_loss(out.class_logits, data.labels[idx], out.mask_logits,
                                                   data.masks[idx], lam)
                model.zero_grad()
                total.backward()
                ad.adam_step(params, lr)
            except ad.NumericError as err:
                raise ad.NumericError(f"epoch {epoch} batch {b}: {err}") from err
            n = len(idx)
            sums += n * np.array([total.item(), l_class.item(), 0.0 if l_seg is None else l_seg.item()])
            seg_seen = l_seg is not None
            correct += int((out.class_logits.data.argmax(axis=1) == data.labels[idx]).sum())
            seen += n
            steps += 1
        if steps == 0:
            raise ValidationError("no batch of size >= 2 could be formed")
        mean = sums / seen
        entry = EpochLog(epoch, float(mean[0]), float(mean[1]), float(mean[2]) if seg_seen else None,
                         100.0 * correct / seen, time.perf_counter() - t0, steps)
        logs.append(entry)
        log.info("epoch %d loss %.4f train OA %.1f", epoch, entry.loss_total, entry.train_oa)
        if cfg.early_stop_patience:
            if best - entry.loss_total >= cfg.early_stop_delta:
                best, stale = entry.loss_total, 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    ckpt = Checkpoint(model_cfg, {k: v.copy() for k, v in model.state_dict().items()},
                      list(class_names) if class_names is not None else None)
    return ckpt, logs


# -- evaluation -------------------------------------------------------------------------------


@dataclass
class Predictions:
    classes: np.ndarray
    masks: np.ndarray | None


def predict(model: Model, points: np.ndarray, batch_size: int = 32) -> Predictions:
    """Evaluation-mode class and mask predictions for ``(M, n, 3)`` points."""
    classes, masks = [], []
    with ad.no_grad():
        for start in range(0, len(points), batch_size):
            out = model.forward(points[start:start + batch_size], training=False)
            classes.append(out.class_logits.data.argmax(axis=1))
            if out.mask_logits is not None:
                masks.append(out.mask_logits.data.argmax(axis=-1).astype(np.uint8))
    return Predictions(np.concatenate(classes), np.concatenate(masks) if masks else None)


def _class_names(ckpt: Checkpoint) -> list[str]:
    n = ckpt.config.num_classes
    if ckpt.class_names is not None and len(ckpt.class_names) == n:
        return list(ckpt.class_names)
    return list(ClassTable.generic(n).names)


def evaluate_dataset(ckpt: Checkpoint, data: Dataset, excluded: int = 0):
    if len(data) == 0:
        raise ValidationError("nothing to evaluate: the split is empty")
    n = ckpt.config.num_classes
    if data.labels.max() >= n:
        raise ValidationError(f"class {data.labels.max()} present in labels but the model outputs only {n} classes")
    preds = predict(ckpt.model(), data.points)
    metrics = metrics_from_predictions(data.labels, preds.classes, n, _class_names(ckpt),
                                       data.masks if preds.masks is not None else None, preds.masks, excluded)
    return metrics, preds


def evaluate(ckpt: Checkpoint, manifest: Manifest, split: str, root) -> Metrics:
    data = load_dataset(manifest, root, ckpt.config.num_points, split)
    return evaluate_dataset(ckpt, data)[0]


def cross_evaluate(ckpt: Checkpoint, manifest: Manifest, class_map: Mapping[int, int], root,
                   split: str | None = "test") -> Metrics:
    """Evaluate on a foreign dataset whose class ids are translated by ``class_map``.

    Objects of unmapped classes are left out and counted in ``Metrics.excluded``.
    """
    targets = list(class_map.values())
    if len(set(targets)) != len(targets):
        raise ValidationError("class_map must be injective")
    if any(not 0 <= t < ckpt.config.num_classes for t in targets):
        raise ValidationError("class_map targets a class the model does not have")
    chosen = [e for e in manifest if split is None or e.split == split]
    kept = [e for e in chosen if e.class_id in class_map]
    if not kept:
        raise ValidationError("no evaluation object belongs to a mapped class")
    data = load_dataset(Manifest(tuple(kept)), root, ckpt.config.num_points)
    data.labels = np.array([class_map[e.class_id] for e in kept], dtype=np.int64)
    return evaluate_dataset(ckpt, data, excluded=len(chosen) - len(kept))[0]


# -- reports ------------------------------------------------------------------------------------


def export_report(metrics: Metrics, logs: Sequence[EpochLog], out_dir, data: Dataset | None = None,
                  predictions: Predictions | None = None) -> None:
    """Write metrics.json, confusion.csv, training_log.csv and, given predictions, masks/*.sobn."""
    if metrics.num_objects == 0:
        raise ValidationError("refusing to export a report for an empty evaluation")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=2), encoding="utf-8")
    with open(out / "confusion.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["truth\\predicted"] + list(metrics.class_names))
        for name, row in zip(metrics.class_names, metrics.confusion):
            w.writerow([name] + [int(v) for v in row])
    with open(out / "training_log.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss_total", "loss_class", "loss_seg", "train_oa", "wall_time", "steps"])
        for entry in logs:
            w.writerow([getattr(entry, k) for k in asdict(entry)])
    if data is not None and predictions is not None and predictions.masks is not None:
        mdir = out / "masks"
        mdir.mkdir(exist_ok=True)
        for i, e in enumerate(data.entries):
            name = e.path.replace("/", "__")
            (mdir / name).write_bytes(raw_object_bytes(data.points[i], predictions.masks[i],
                                                       int(predictions.classes[i]), e.sample_index))


def read_metrics(path) -> Metrics:
    return Metrics.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
