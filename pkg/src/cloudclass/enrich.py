"""Dataset variants from labeled scenes.

Objects are cut out of scenes with (possibly perturbed) bounding boxes, checked
for retention, and written as SOBN files plus a manifest. A procedural scene
generator stands in for scanned indoor scenes.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    AABB,
    ClassTable,
    Manifest,
    ManifestEntry,
    ObjectInstance,
    ValidationError,
    VariantTag,
    derive_seed,
    save_manifest,
    scene_from_bytes,
    scene_to_bytes,
    write_object,
)

__all__ = [
    "ExtractionEmptyError",
    "SplitError",
    "SceneRecord",
    "PerturbSpec",
    "AugmentSpec",
    "PerturbedBox",
    "PERTURB_SPECS",
    "SynthConfig",
    "SHAPES",
    "extract_in_box",
    "strip_background",
    "perturb_box",
    "retention_ok",
    "retention_fraction",
    "generate_variant",
    "sample_to_n",
    "normalize_unit",
    "split_by_scene",
    "augment",
    "synth_scene",
    "save_scene",
    "load_scenes",
    "iter_synth_scenes",
]

GRAVITY_AXIS = 2
BACKGROUND_ID = 0


class ExtractionEmptyError(ValueError):
    """A box captured no foreground point of its target instance."""


class SplitError(ValueError):
    """Scenes cannot be partitioned into train and test."""


@dataclass(frozen=True, eq=False)
class SceneRecord:
    """Scene points in world coordinates (z up) with per-point instance ids.

    Instance id 0 marks background (floor, walls); ``instances`` maps every
    object id to ``(class_id, box)``.
    """

    scene_id: str
    points: np.ndarray
    instance_ids: np.ndarray
    instances: dict[int, tuple[int, AABB]]

    def __post_init__(self):
        points = np.ascontiguousarray(self.points, dtype=np.float32)
        ids = np.ascontiguousarray(self.instance_ids, dtype=np.int64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValidationError(f"scene points must be (N, 3), got {points.shape}")
        if ids.shape != (points.shape[0],):
            raise ValidationError("instance id channel length differs from point count")
        for iid, (_, box) in self.instances.items():
            own = points[ids == iid]
            if len(own) == 0:
                raise ValidationError(f"instance {iid} of scene {self.scene_id!r} has no points")
            if not box.contains(own).all():
                raise ValidationError(f"box of instance {iid} in scene {self.scene_id!r} misses some of its points")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "instance_ids", ids)


@dataclass(frozen=True)
class PerturbSpec:
    translate_frac: float = 0.0
    rotate: bool = False
    scale: bool = False
    samples_per_object: int = 5
    retention_min: float = 0.5
    scale_range: tuple[float, float] = (0.75, 1.25)

    def __post_init__(self):
        if self.translate_frac < 0:
            raise ValidationError("translate_frac must be >= 0")
        if not 0 < self.retention_min <= 1:
            raise ValidationError("retention_min must lie in (0, 1]")
        if not 1 <= self.samples_per_object <= 5:
            raise ValidationError("samples_per_object must lie in [1, 5]")


PERTURB_SPECS = {
    VariantTag.PB_T25: PerturbSpec(0.25),
    VariantTag.PB_T25_R: PerturbSpec(0.25, rotate=True),
    VariantTag.PB_T50_R: PerturbSpec(0.50, rotate=True),
    VariantTag.PB_T50_RS: PerturbSpec(0.50, rotate=True, scale=True),
}


@dataclass(frozen=True)
class AugmentSpec:
    rotate_gravity: bool = True
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05

    def __post_init__(self):
        if not 0 <= self.jitter_sigma <= self.jitter_clip:
            raise ValidationError("need 0 <= jitter_sigma <= jitter_clip")


def _rotation_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class PerturbedBox:
    """An oriented box: ``local`` is axis-aligned in a frame rotated by ``theta`` about the
    vertical axis through the box center; ``aabb`` is the world-axis re-fit of its corners."""

    local: AABB
    theta: float = 0.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))

    @property
    def center(self) -> np.ndarray:
        return self.local.center

    @property
    def aabb(self) -> AABB:
        if self.theta == 0.0:
            return self.local
        corners = (self.local.corners() - self.center) @ _rotation_z(self.theta).T + self.center
        return AABB.fit(corners)

    def to_frame(self, points: np.ndarray) -> np.ndarray:
        """World coordinates -> box frame (identity when unrotated)."""
        if self.theta == 0.0:
            return np.asarray(points)
        c = self.center
        d = np.asarray(points, dtype=np.float64) - c
        cos, sin = np.cos(self.theta), np.sin(self.theta)
        # R(-theta) @ (p - c), written per channel so results do not depend on how many points are passed
        out = np.empty_like(d)
        out[..., 0] = d[..., 0] * cos + d[..., 1] * sin + c[0]
        out[..., 1] = d[..., 1] * cos - d[..., 0] * sin + c[1]
        out[..., 2] = d[..., 2] + c[2]
        return out

    def contains(self, points: np.ndarray) -> np.ndarray:
        return self.local.contains(self.to_frame(points))


def _as_perturbed(box) -> PerturbedBox:
    return box if isinstance(box, PerturbedBox) else PerturbedBox(box)


def extract_in_box(scene: SceneRecord, instance_id: int, box, variant: VariantTag = VariantTag.OBJ_BG,
                   sample_index: int = 0) -> ObjectInstance:
    """All scene points inside the closed box, masked by membership in ``instance_id``.

    For a rotated box the points are returned in the box frame.
    """
    if instance_id not in scene.instances:
        raise KeyError(f"scene {scene.scene_id!r} has no instance {instance_id}")
    pbox = _as_perturbed(box)
    if pbox.theta == 0.0:
        inside = np.flatnonzero(pbox.local.contains(scene.points))
        kept = scene.points[inside]
    else:
        # cheap world-axis prefilter, padded against rounding, before the exact test in the box frame
        world = pbox.aabb
        pad = 1e-6 * (1.0 + np.abs(world.max_corner - world.min_corner).max())
        candidates = np.flatnonzero(AABB(world.min_corner - pad, world.max_corner + pad).contains(scene.points))
        frame = pbox.to_frame(scene.points[candidates])
        keep = pbox.local.contains(frame)
        inside = candidates[keep]
        kept = frame[keep]
    mask = (scene.instance_ids[inside] == instance_id).astype(np.uint8)
    if not mask.any():
        raise ExtractionEmptyError(f"box around instance {instance_id} of {scene.scene_id!r} holds no foreground")
    class_id, _ = scene.instances[instance_id]
    return ObjectInstance(kept, mask, class_id, scene.scene_id, variant, sample_index)


def strip_background(obj: ObjectInstance, variant: VariantTag | None = None) -> ObjectInstance:
    keep = obj.mask == 1
    return ObjectInstance(obj.points[keep], obj.mask[keep], obj.class_id, obj.scene_id,
                          obj.variant if variant is None else variant, obj.sample_index)


def perturb_box(box: AABB, spec: PerturbSpec, seed: int) -> PerturbedBox:
    """Translate, scale and rotate a ground-truth box, deterministically in ``seed``.

    Translation per axis is uniform in +/- ``translate_frac`` times that axis'
    extent, scale per axis uniform in ``spec.scale_range``, rotation uniform in
    [0, 2pi) about the vertical axis through the moved center.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    extent = box.extent
    shift = rng.uniform(-1.0, 1.0, size=3) * spec.translate_frac * extent
    factors = rng.uniform(*spec.scale_range, size=3) if spec.scale else np.ones(3)
    theta = float(rng.uniform(0.0, 2.0 * np.pi)) if spec.rotate else 0.0
    if spec.translate_frac == 0 and not spec.scale:
        local = box
    else:
        local = AABB.from_center(box.center + shift, extent * factors)
    return PerturbedBox(local, theta, shift, factors)


def retention_fraction(foreground_points: np.ndarray, new_box) -> float:
    fg = np.asarray(foreground_points)
    if len(fg) == 0:
        raise ValueError("no foreground points")
    return float(_as_perturbed(new_box).contains(fg).sum()) / len(fg)


def retention_ok(original: ObjectInstance, new_box, retention_min: float = 0.5) -> bool:
    """True iff at least ``retention_min`` of the original foreground points fall in ``new_box``."""
    fg = original.points[original.mask == 1]
    inside = int(_as_perturbed(new_box).contains(fg).sum())
    return inside >= retention_min * len(fg)


# -- pipeline -----------------------------------------------------------------------


def _object_tasks(scenes: Sequence[SceneRecord], variant: VariantTag, spec: PerturbSpec | None):
    samples = spec.samples_per_object if variant.perturbed else 1
    for scene in scenes:
        for iid in sorted(scene.instances):
            for s in range(samples):
                yield scene, iid, s


def _run_task(task, variant: VariantTag, spec: PerturbSpec | None, global_seed: int):
    scene, iid, sample = task
    _, gt_box = scene.instances[iid]
    original = extract_in_box(scene, iid, gt_box, VariantTag.OBJ_BG)
    if variant is VariantTag.OBJ_ONLY:
        return strip_background(original, VariantTag.OBJ_ONLY), None
    if variant is VariantTag.OBJ_BG:
        return original, None
    seed = derive_seed(global_seed, scene.scene_id, iid, sample, "perturb")
    pbox = perturb_box(gt_box, spec, seed)
    fg = original.points[original.mask == 1]
    frac = retention_fraction(fg, pbox)
    if not retention_ok(original, pbox, spec.retention_min):
        return None, None
    obj = extract_in_box(scene, iid, pbox, variant, sample)
    record = {
        "translation": pbox.translation.tolist(),
        "scale": pbox.scale.tolist(),
        "theta": pbox.theta,
        "extent": gt_box.extent.tolist(),
        "gt_min": gt_box.min_corner.tolist(),
        "gt_max": gt_box.max_corner.tolist(),
        "retention": frac,
    }
    return obj, record


def generate_variant(scenes: Sequence[SceneRecord], variant, out_dir, global_seed: int = 0,
                     spec: PerturbSpec | None = None, workers: int = 1) -> Manifest:
    """Write one dataset variant as SOBN files under ``out_dir`` and return its manifest.

    Perturbed variants emit up to ``spec.samples_per_object`` samples per instance;
    samples failing the retention rule are dropped, not redrawn. Alongside the
    objects, ``manifest.tsv`` and ``provenance.jsonl`` (the box parameters of every
    perturbed sample) are written. Output does not depend on ``workers``.
    """
    variant = VariantTag(variant)
    if variant.perturbed and spec is None:
        spec = PERTURB_SPECS[variant]
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create output directory {out}: {err}") from err
    tasks = list(_object_tasks(scenes, variant, spec))

    def run(task):
        return _run_task(task, variant, spec, global_seed)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    entries, provenance = [], []
    for (scene, iid, sample), (obj, record) in zip(tasks, results):
        if obj is None:
            continue
        rel = f"{variant.value}/{scene.scene_id}/{scene.scene_id}_{iid:04d}_{sample}.sobn"
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        write_object(obj, path)
        entries.append(ManifestEntry(rel, scene.scene_id, obj.class_id, variant, sample))
        if record is not None:
            provenance.append({"path": rel, "scene_id": scene.scene_id, "instance_id": iid,
                               "sample_index": sample, **record})
    entries.sort(key=lambda e: e.path)
    provenance.sort(key=lambda r: r["path"])
    manifest = Manifest(tuple(entries))
    save_manifest(manifest, out / "manifest.tsv")
    if variant.perturbed:
        with open(out / "provenance.jsonl", "w", encoding="utf-8") as fh:
            for r in provenance:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    return manifest


def sample_to_n(points: np.ndarray, mask: np.ndarray, n: int = 1024, seed: int = 0):
    """Resample a cloud (and its mask) to exactly ``n`` points.

    Draws without replacement when there are enough points; otherwise keeps
    every point and fills up with draws with replacement.
    """
    points = np.asarray(points)
    mask = np.asarray(mask)
    count = len(points)
    if count == 0:
        raise ValueError("cannot sample from an empty cloud")
    rng = np.random.Generator(np.random.PCG64(seed))
    if count >= n:
        idx = rng.choice(count, size=n, replace=False)
    else:
        idx = np.concatenate([np.arange(count), rng.integers(0, count, size=n - count)])
    return points[idx], mask[idx]


def normalize_unit(points: np.ndarray) -> np.ndarray:
    """Center at the centroid and scale so the farthest point has norm 1."""
    points = np.asarray(points)
    if len(points) == 0:
        raise ValueError("cannot normalize an empty cloud")
    p = points.astype(np.float64)
    centered = p - p.mean(axis=0)
    scale = np.sqrt((centered ** 2).sum(axis=1)).max()
    if scale < 1e-12:
        scale = 1.0
    out = centered / scale
    return out.astype(points.dtype) if points.dtype.kind == "f" else out


def split_by_scene(manifest: Manifest, train_frac: float = 0.8, seed: int = 0) -> Manifest:
    """Assign whole scenes to train or test so that about ``train_frac`` of objects train."""
    scenes = manifest.scenes
    if len(scenes) < 2:
        raise SplitError(f"need at least 2 scenes to split, found {len(scenes)}")
    sizes = {s: 0 for s in scenes}
    for e in manifest:
        sizes[e.scene_id] += 1
    order = [scenes[i] for i in np.random.Generator(np.random.PCG64(seed)).permutation(len(scenes))]
    target = (1.0 - train_frac) * len(manifest)
    test: set[str] = set()
    count = 0
    for s in order:
        if len(test) == len(scenes) - 1:
            break
        if abs(count + sizes[s] - target) < abs(count - target):
            test.add(s)
            count += sizes[s]
    if not test:
        test.add(order[0])
    entries = tuple(
        ManifestEntry(e.path, e.scene_id, e.class_id, e.variant, e.sample_index,
                      "test" if e.scene_id in test else "train")
        for e in manifest
    )
    return Manifest(entries)


def augment(points: np.ndarray, spec: AugmentSpec = AugmentSpec(), seed: int = 0) -> np.ndarray:
    """Random rotation about the vertical axis, then clipped Gaussian per-point jitter."""
    rng = np.random.Generator(np.random.PCG64(seed))
    out = np.asarray(points, dtype=np.float64)
    if spec.rotate_gravity:
        out = out @ _rotation_z(rng.uniform(0.0, 2.0 * np.pi)).T
    if spec.jitter_sigma > 0:
        out = out + np.clip(rng.normal(0.0, spec.jitter_sigma, size=out.shape), -spec.jitter_clip, spec.jitter_clip)
    return out.astype(np.asarray(points).dtype) if np.asarray(points).dtype.kind == "f" else out


# -- procedural scenes -------------------------------------------------------------------

SHAPES = ("box", "cylinder", "sphere_cap", "l_bracket", "backed_box")


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of a procedural scene: a floor, optional walls and objects of the listed shape classes."""

    classes: tuple[str, ...] = ("box", "cylinder", "sphere_cap", "l_bracket")
    num_objects: int = 4
    walls: bool = True
    room_size: float = 3.0
    wall_height: float = 1.2
    density: float = 1200.0
    noise_sigma: float = 0.004
    box_margin: float = 0.02
    size_range: tuple[float, float] = (0.35, 0.8)
    min_gap: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        unknown = [c for c in self.classes if c not in SHAPES]
        if unknown:
            raise ValidationError(f"unknown shape classes {unknown}; choose from {SHAPES}")
        if len(self.classes) < 2:
            raise ValidationError("a scene configuration needs at least 2 shape classes")
        if self.num_objects < 1 or self.room_size <= 0 or self.density <= 0:
            raise ValidationError("num_objects, room_size and density must be positive")

    @property
    def class_table(self) -> ClassTable:
        return ClassTable(self.classes)


def _sample_rect(rng, origin, u, v, density):
    """Uniform points on the parallelogram origin + a*u + b*v, a,b in [0,1]."""
    area = np.linalg.norm(np.cross(u, v))
    n = max(int(rng.poisson(area * density)), 1)
    a, b = rng.random((2, n))
    return origin + a[:, None] * u + b[:, None] * v


def _box_surface(rng, lo, hi, density, bottom=False):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    d = hi - lo
    ex, ey, ez = np.diag(d)
    faces = [
        (lo + [0, 0, d[2]], ex, ey),  # top
        (lo, ex, ez), (lo + [0, d[1], 0], ex, ez),
        (lo, ey, ez), (lo + [d[0], 0, 0], ey, ez),
    ]
    if bottom:
        faces.append((lo, ex, ey))
    return np.concatenate([_sample_rect(rng, o, u, v, density) for o, u, v in faces])


def _shape_points(rng, shape: str, size: float, density: float) -> np.ndarray:
    """Surface samples of a shape with its footprint centered at the origin, resting on z=0."""
    if shape == "box":
        w, d, h = size * rng.uniform(0.6, 1.0, 3)
        return _box_surface(rng, [-w / 2, -d / 2, 0], [w / 2, d / 2, h], density)
    if shape == "cylinder":
        r = size / 2 * rng.uniform(0.6, 1.0)
        h = size * rng.uniform(0.7, 1.3)
        n_side = max(int(rng.poisson(2 * np.pi * r * h * density)), 1)
        phi = rng.uniform(0, 2 * np.pi, n_side)
        side = np.stack([r * np.cos(phi), r * np.sin(phi), rng.uniform(0, h, n_side)], axis=1)
        n_top = max(int(rng.poisson(np.pi * r * r * density)), 1)
        rr = r * np.sqrt(rng.random(n_top))
        phi = rng.uniform(0, 2 * np.pi, n_top)
        top = np.stack([rr * np.cos(phi), rr * np.sin(phi), np.full(n_top, h)], axis=1)
        return np.concatenate([side, top])
    if shape == "sphere_cap":
        r = size / 2 * rng.uniform(0.8, 1.2)
        cut = rng.uniform(0.0, 0.5) * r  # plane height below the center
        zmin = -cut
        area = 2 * np.pi * r * (r - zmin)
        n = max(int(rng.poisson(area * density)), 1)
        z = rng.uniform(zmin, r, n)  # uniform in z is uniform on the sphere surface
        phi = rng.uniform(0, 2 * np.pi, n)
        rho = np.sqrt(np.maximum(r * r - z * z, 0.0))
        return np.stack([rho * np.cos(phi), rho * np.sin(phi), z - zmin], axis=1)
    if shape == "l_bracket":
        w, d = size * rng.uniform(0.7, 1.0, 2)
        t = size * 0.15
        h = size * rng.uniform(0.8, 1.2)
        base = _box_surface(rng, [-w / 2, -d / 2, 0], [w / 2, d / 2, t], density)
        upright = _box_surface(rng, [-w / 2, d / 2 - t, t], [w / 2, d / 2, h], density)
        return np.concatenate([base, upright])
    if shape == "backed_box":
        w, d = size * rng.uniform(0.7, 1.0, 2)
        h = size * rng.uniform(0.35, 0.55)
        body = _box_surface(rng, [-w / 2, -d / 2, 0], [w / 2, d / 2, h], density)
        panel_h = h + size * rng.uniform(0.4, 0.7)
        panel = _box_surface(rng, [-w / 2, d / 2, 0], [w / 2, d / 2 + 0.03, panel_h], density)
        return np.concatenate([body, panel])
    raise ValidationError(f"unknown shape {shape!r}")


def synth_scene(config: SynthConfig, seed: int, scene_id: str | None = None) -> SceneRecord:
    """Procedural room: noisy floor, optional walls along x=0 and y=0, and non-overlapping objects.

    Floor and wall points carry instance id 0. Each object's ground-truth box is
    the fit of its points grown by ``config.box_margin``, so nearby floor and
    wall points end up inside it as background.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    scene_id = scene_id or f"synth_{seed:016x}"
    size = config.room_size
    placed: list[tuple[np.ndarray, float]] = []
    parts, ids, instances = [], [], {}
    for iid in range(1, config.num_objects + 1):
        shape_idx = int(rng.integers(len(config.classes)))
        obj_size = rng.uniform(*config.size_range)
        pts = _shape_points(rng, config.classes[shape_idx], obj_size, config.density)
        pts = pts @ _rotation_z(rng.uniform(0, 2 * np.pi)).T
        radius = float(np.sqrt((pts[:, :2] ** 2).sum(axis=1)).max())
        for _ in range(200):
            if config.walls and rng.random() < 0.5:
                # push against one of the walls
                pos = rng.uniform(radius, size - radius, 2)
                pos[int(rng.integers(2))] = radius + config.min_gap / 2
            else:
                pos = rng.uniform(radius, size - radius, 2)
            if all(np.linalg.norm(pos - c) >= radius + r + config.min_gap for c, r in placed):
                break
        else:
            continue
        placed.append((pos, radius))
        pts = pts + [pos[0], pos[1], 0.0]
        pts = pts + rng.normal(0, config.noise_sigma, pts.shape)
        parts.append(pts)
        ids.append(np.full(len(pts), iid))
        box = AABB.fit(pts)
        instances[iid] = (shape_idx, AABB(box.min_corner - config.box_margin, box.max_corner + config.box_margin))
    floor = _sample_rect(rng, np.zeros(3), np.array([size, 0, 0]), np.array([0, size, 0]), config.density)
    bg = [floor]
    if config.walls:
        h = config.wall_height
        bg.append(_sample_rect(rng, np.zeros(3), np.array([size, 0, 0]), np.array([0, 0, h]), config.density))
        bg.append(_sample_rect(rng, np.zeros(3), np.array([0, size, 0]), np.array([0, 0, h]), config.density))
    bg = np.concatenate(bg)
    bg = bg + rng.normal(0, config.noise_sigma, bg.shape)
    points = np.concatenate(parts + [bg])
    instance_ids = np.concatenate(ids + [np.full(len(bg), BACKGROUND_ID)])
    # boxes were fit in float64; make sure they still contain the float32-rounded points
    points32 = points.astype(np.float32)
    fixed = {}
    for iid, (cls, box) in instances.items():
        own = points32[instance_ids == iid].astype(np.float64)
        lo = np.minimum(box.min_corner, own.min(axis=0))
        hi = np.maximum(box.max_corner, own.max(axis=0))
        fixed[iid] = (cls, AABB(lo, hi))
    return SceneRecord(scene_id, points32, instance_ids, fixed)


# -- scene files -----------------------------------------------------------------------------


def save_scene(scene: SceneRecord, directory, class_table: ClassTable) -> None:
    """Write ``<scene_id>.sobn`` (points + instance-id channel) and ``<scene_id>.instances.jsonl``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{scene.scene_id}.sobn").write_bytes(scene_to_bytes(scene.points, scene.instance_ids))
    with open(d / f"{scene.scene_id}.instances.jsonl", "w", encoding="utf-8") as fh:
        for iid in sorted(scene.instances):
            cls, box = scene.instances[iid]
            fh.write(json.dumps({"instance_id": iid, "class": class_table.name(cls),
                                 "min": box.min_corner.tolist(), "max": box.max_corner.tolist()}) + "\n")
    classes_file = d / "classes.txt"
    text = "".join(n + "\n" for n in class_table.names)
    if not classes_file.exists() or classes_file.read_text(encoding="utf-8") != text:
        classes_file.write_text(text, encoding="utf-8")


def load_scenes(directory) -> tuple[list[SceneRecord], ClassTable]:
    """Read every scene in a directory; class names resolve through ``classes.txt`` if present."""
    d = Path(directory)
    if not d.is_dir():
        raise ValidationError(f"scene directory {d} does not exist")
    classes_file = d / "classes.txt"
    table = ClassTable(tuple(classes_file.read_text(encoding="utf-8").split())) if classes_file.exists() else ClassTable()
    scenes = []
    for path in sorted(d.glob("*.sobn")):
        scene_id = path.stem
        points, ids = scene_from_bytes(path.read_bytes())
        instances = {}
        table_path = d / f"{scene_id}.instances.jsonl"
        if not table_path.exists():
            raise ValidationError(f"missing instance table {table_path.name}")
        for line in table_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            instances[int(rec["instance_id"])] = (table.id(rec["class"]), AABB(rec["min"], rec["max"]))
        scenes.append(SceneRecord(scene_id, points, ids, instances))
    return scenes, table


def iter_synth_scenes(config: SynthConfig, count: int, global_seed: int) -> Iterable[SceneRecord]:
    for i in range(count):
        yield synth_scene(config, derive_seed(global_seed, f"scene{i:04d}", "synth"), scene_id=f"scene{i:04d}")
