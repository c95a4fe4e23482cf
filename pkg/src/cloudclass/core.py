"""Domain types, on-disk formats (SOBN objects, TSV manifests, SOBW checkpoints) and seeding."""

from __future__ import annotations

import enum
import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

__all__ = [
    "SCANOBJECTNN_CLASSES",
    "ValidationError",
    "FormatError",
    "VariantTag",
    "AABB",
    "ClassTable",
    "ObjectInstance",
    "ManifestEntry",
    "Manifest",
    "derive_seed",
    "rng_for",
    "write_object",
    "read_object",
    "object_to_bytes",
    "object_from_bytes",
    "raw_object_bytes",
    "scene_to_bytes",
    "scene_from_bytes",
    "manifest_to_text",
    "manifest_from_text",
    "load_manifest",
    "save_manifest",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_to_bytes",
    "checkpoint_from_bytes",
]

SCANOBJECTNN_CLASSES = (
    "bag", "bed", "bin", "box", "cabinet", "chair", "desk", "display",
    "door", "pillow", "shelf", "sink", "sofa", "table", "toilet",
)

SOBN_MAGIC = b"SOBN"
SOBW_MAGIC = b"SOBW"
FORMAT_VERSION = 1
FLAG_MASK = 1
FLAG_INSTANCE_IDS = 2
_HEADER = struct.Struct("<4sIIIII")
MAX_SAMPLES = 5
UNASSIGNED = "-"


class ValidationError(ValueError):
    """Raised when a value violates a domain invariant."""


class FormatError(ValueError):
    """Raised for malformed binary files; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class VariantTag(str, enum.Enum):
    OBJ_ONLY = "OBJ_ONLY"
    OBJ_BG = "OBJ_BG"
    PB_T25 = "PB_T25"
    PB_T25_R = "PB_T25_R"
    PB_T50_R = "PB_T50_R"
    PB_T50_RS = "PB_T50_RS"

    @property
    def perturbed(self) -> bool:
        return self.value.startswith("PB_")


@dataclass(frozen=True)
class AABB:
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValidationError("AABB corners must be finite")
        if np.any(lo > hi):
            raise ValidationError(f"AABB min {lo} exceeds max {hi}")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @classmethod
    def from_center(cls, center, extent) -> "AABB":
        center = np.asarray(center, dtype=np.float64)
        half = np.asarray(extent, dtype=np.float64) / 2.0
        return cls(center - half, center + half)

    @classmethod
    def fit(cls, points) -> "AABB":
        points = np.asarray(points, dtype=np.float64)
        return cls(points.min(axis=0), points.max(axis=0))

    @property
    def center(self) -> np.ndarray:
        return (self.min_corner + self.max_corner) / 2.0

    @property
    def extent(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    def corners(self) -> np.ndarray:
        lo, hi = self.min_corner, self.max_corner
        return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])

    def contains(self, points) -> np.ndarray:
        """Closed-box membership test, one boolean per point."""
        points = np.asarray(points)
        lo, hi = self.min_corner, self.max_corner
        inside = (points[..., 0] >= lo[0]) & (points[..., 0] <= hi[0])
        for c in (1, 2):
            inside &= (points[..., c] >= lo[c]) & (points[..., c] <= hi[c])
        return inside

    def __eq__(self, other):
        if not isinstance(other, AABB):
            return NotImplemented
        return np.array_equal(self.min_corner, other.min_corner) and np.array_equal(self.max_corner, other.max_corner)

    def __hash__(self):
        return hash((self.min_corner.tobytes(), self.max_corner.tobytes()))


@dataclass(frozen=True)
class ClassTable:
    """Fixed bijection between class ids and names."""

    names: tuple[str, ...] = SCANOBJECTNN_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise ValidationError("class names must be unique")

    def __len__(self):
        return len(self.names)

    def name(self, class_id: int) -> str:
        if not 0 <= class_id < len(self.names):
            raise ValidationError(f"class id {class_id} outside [0, {len(self.names)})")
        return self.names[class_id]

    def id(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"unknown class name {name!r}") from None

    @classmethod
    def generic(cls, num_classes: int) -> "ClassTable":
        return cls(tuple(f"class_{i}" for i in range(num_classes)))


@dataclass(frozen=True, eq=False)
class ObjectInstance:
    """A point cloud object with a per-point foreground mask.

    ``points`` is an ``(N, 3)`` float32 array whose row order is significant,
    ``mask`` an ``(N,)`` uint8 array with 1 for foreground and 0 for background.
    """

    points: np.ndarray
    mask: np.ndarray
    class_id: int
    scene_id: str = ""
    variant: VariantTag = VariantTag.OBJ_BG
    sample_index: int = 0

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float32, order="C")
        mask = np.array(self.mask, dtype=np.uint8, order="C")
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValidationError(f"points must have shape (N, 3), got {points.shape}")
        if mask.shape != (points.shape[0],):
            raise ValidationError(f"mask length {mask.shape} does not match point count {points.shape[0]}")
        if not np.all(np.isfinite(points)):
            raise ValidationError("point coordinates must be finite")
        if np.any(mask > 1):
            raise ValidationError("mask values must be 0 or 1")
        if not mask.any():
            raise ValidationError("object has no foreground points")
        variant = VariantTag(self.variant)
        if not 0 <= self.sample_index < MAX_SAMPLES:
            raise ValidationError(f"sample_index {self.sample_index} outside [0, {MAX_SAMPLES})")
        if not variant.perturbed and self.sample_index != 0:
            raise ValidationError("unperturbed variants must have sample_index 0")
        if self.class_id < 0:
            raise ValidationError("class_id must be non-negative")
        points.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "variant", variant)
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "sample_index", int(self.sample_index))

    @property
    def count(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ObjectInstance):
            return NotImplemented
        return (
            self.points.tobytes() == other.points.tobytes()
            and np.array_equal(self.mask, other.mask)
            and (self.class_id, self.scene_id, self.variant, self.sample_index)
            == (other.class_id, other.scene_id, other.variant, other.sample_index)
        )


# -- seeding -------------------------------------------------------------------

def derive_seed(global_seed: int, *parts) -> int:
    """Hash a global seed and any identifying parts into a child 64-bit seed.

    The result is a pure function of its arguments, so per-task streams do not
    depend on iteration order or worker count.
    """
    h = hashlib.blake2b(digest_size=8, person=b"cloudcls")
    h.update(struct.pack("<Q", int(global_seed) & 0xFFFFFFFFFFFFFFFF))
    for part in parts:
        encoded = repr(part).encode("utf-8")
        h.update(struct.pack("<I", len(encoded)))
        h.update(encoded)
    return int.from_bytes(h.digest(), "little")


def rng_for(global_seed: int, *parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(global_seed, *parts)))


# -- SOBN objects ----------------------------------------------------------------

def raw_object_bytes(points, mask, class_id: int, sample_index: int = 0) -> bytes:
    """SOBN bytes without ObjectInstance validation (e.g. predicted masks, which may be all background)."""
    points = np.ascontiguousarray(points, dtype="<f4").reshape(-1, 3)
    mask = np.ascontiguousarray(mask, dtype=np.uint8).reshape(-1)
    if len(mask) != len(points):
        raise ValidationError("mask length differs from point count")
    header = _HEADER.pack(SOBN_MAGIC, FORMAT_VERSION, class_id, len(points), FLAG_MASK, sample_index)
    return header + points.tobytes() + mask.tobytes()


def object_to_bytes(obj: ObjectInstance) -> bytes:
    return raw_object_bytes(obj.points, obj.mask, obj.class_id, obj.sample_index)


def write_object(obj: ObjectInstance, path) -> None:
    Path(path).write_bytes(object_to_bytes(obj))


def _parse_sobn(data: bytes):
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", len(data))
    magic, version, class_id, count, flags, sample_index = _HEADER.unpack_from(data, 0)
    if magic != SOBN_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    offset = _HEADER.size
    n_xyz = count * 12
    if len(data) < offset + n_xyz:
        raise FormatError(f"truncated coordinate payload: need {n_xyz} bytes", len(data))
    points = np.frombuffer(data, dtype="<f4", count=count * 3, offset=offset).reshape(count, 3)
    offset += n_xyz
    mask = None
    if flags & FLAG_MASK:
        if len(data) < offset + count:
            raise FormatError(f"truncated mask: expected {count} bytes, found {len(data) - offset}", len(data))
        mask = np.frombuffer(data, dtype=np.uint8, count=count, offset=offset)
        offset += count
    instance_ids = None
    if flags & FLAG_INSTANCE_IDS:
        if len(data) < offset + 4 * count:
            raise FormatError("truncated instance-id channel", len(data))
        instance_ids = np.frombuffer(data, dtype="<u4", count=count, offset=offset)
        offset += 4 * count
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes", offset)
    return class_id, sample_index, points, mask, instance_ids


def object_from_bytes(data: bytes, *, scene_id: str = "", variant: VariantTag | None = None) -> ObjectInstance:
    class_id, sample_index, points, mask, _ = _parse_sobn(data)
    if mask is None:
        mask = np.ones(points.shape[0], dtype=np.uint8)
    if variant is None:
        # SOBN does not carry the tag; callers holding a manifest entry pass it in
        if sample_index:
            raise FormatError("perturbed sample read without its variant tag", 20)
        variant = VariantTag.OBJ_ONLY if mask.all() else VariantTag.OBJ_BG
    try:
        return ObjectInstance(points.astype(np.float32), mask.copy(), class_id, scene_id, variant, sample_index)
    except ValidationError as err:
        raise FormatError(f"decoded object is invalid: {err}", _HEADER.size) from err


def read_object(path, *, scene_id: str = "", variant: VariantTag | None = None) -> ObjectInstance:
    return object_from_bytes(Path(path).read_bytes(), scene_id=scene_id, variant=variant)


def scene_to_bytes(points: np.ndarray, instance_ids: np.ndarray) -> bytes:
    points = np.ascontiguousarray(points, dtype="<f4")
    header = _HEADER.pack(SOBN_MAGIC, FORMAT_VERSION, 0, len(points), FLAG_INSTANCE_IDS, 0)
    return header + points.tobytes() + np.ascontiguousarray(instance_ids, dtype="<u4").tobytes()


def scene_from_bytes(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    _, _, points, _, instance_ids = _parse_sobn(data)
    if instance_ids is None:
        raise FormatError("scene file lacks the instance-id channel", 16)
    return points.astype(np.float32), instance_ids.astype(np.int64)


# -- manifests -------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    scene_id: str
    class_id: int
    variant: VariantTag
    sample_index: int = 0
    split: str = UNASSIGNED

    def __post_init__(self):
        object.__setattr__(self, "variant", VariantTag(self.variant))
        if self.split not in ("train", "test", UNASSIGNED):
            raise ValidationError(f"split must be train, test or {UNASSIGNED!r}, got {self.split!r}")
        for name in ("path", "scene_id"):
            value = getattr(self, name)
            if not value or "\t" in value or "\n" in value:
                raise ValidationError(f"{name} must be non-empty and free of tabs/newlines: {value!r}")


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...] = field(default_factory=tuple)

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        seen = set()
        for e in entries:
            if e.path in seen:
                raise ValidationError(f"duplicate manifest path {e.path!r}")
            seen.add(e.path)
        train = {e.scene_id for e in entries if e.split == "train"}
        test = {e.scene_id for e in entries if e.split == "test"}
        both = sorted(train & test)
        if both:
            raise ValidationError(f"scene {both[0]!r} appears in both train and test splits")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def split(self, name: str) -> "Manifest":
        return Manifest(tuple(e for e in self.entries if e.split == name))

    @property
    def scenes(self) -> list[str]:
        return sorted({e.scene_id for e in self.entries})


def manifest_to_text(manifest: Manifest) -> str:
    return "".join(
        f"{e.path}\t{e.scene_id}\t{e.class_id}\t{e.variant.value}\t{e.sample_index}\t{e.split}\n"
        for e in manifest.entries
    )


def manifest_from_text(text: str) -> Manifest:
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise ValidationError(f"manifest line {lineno}: expected 6 tab-separated fields, got {len(fields)}")
        path, scene_id, class_id, variant, sample_index, split = fields
        try:
            entries.append(ManifestEntry(path, scene_id, int(class_id), VariantTag(variant), int(sample_index), split))
        except ValueError as err:
            raise ValidationError(f"manifest line {lineno}: {err}") from err
    return Manifest(tuple(entries))


def save_manifest(manifest: Manifest, path) -> None:
    Path(path).write_text(manifest_to_text(manifest), encoding="utf-8")


def load_manifest(path) -> Manifest:
    return manifest_from_text(Path(path).read_text(encoding="utf-8"))


# -- SOBW checkpoints ------------------------------------------------------------

def checkpoint_to_bytes(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named arrays, in the given order, as float32 SOBW."""
    buf = io.BytesIO()
    buf.write(SOBW_MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
    for name, value in tensors.items():
        value = np.asarray(value)
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes) -> dict[str, np.ndarray]:
    def need(offset, n, what):
        if offset + n > len(data):
            raise FormatError(f"truncated {what}", len(data))

    need(0, 12, "header")
    if data[:4] != SOBW_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", 0)
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(offset, 4, "name length")
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        need(offset, name_len, "name")
        try:
            name = data[offset:offset + name_len].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not UTF-8", offset) from None
        offset += name_len
        need(offset, 4, "rank")
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        need(offset, 4 * rank, "shape")
        shape = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        need(offset, 4 * size, f"values of {name!r}")
        if name in out:
            raise FormatError(f"duplicate parameter {name!r}", offset)
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * size
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes", offset)
    return out


def save_checkpoint(tensors: Mapping[str, np.ndarray], path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return checkpoint_from_bytes(Path(path).read_bytes())
