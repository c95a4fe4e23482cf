import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudclass.core import AABB, Manifest, ManifestEntry, ObjectInstance, ValidationError, VariantTag, derive_seed
from cloudclass.enrich import (
    PERTURB_SPECS,
    AugmentSpec,
    ExtractionEmptyError,
    PerturbSpec,
    SceneRecord,
    SplitError,
    SynthConfig,
    augment,
    extract_in_box,
    generate_variant,
    load_scenes,
    normalize_unit,
    perturb_box,
    retention_ok,
    sample_to_n,
    save_scene,
    split_by_scene,
    strip_background,
    synth_scene,
)


def random_scene(seed=0, n=500):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, size=(n, 3)).astype(np.float32)
    ids = rng.integers(0, 4, size=n)
    instances = {i: (i - 1, AABB.fit(pts[ids == i])) for i in (1, 2, 3)}
    return SceneRecord("rand", pts, ids, instances)


# -- extraction ---------------------------------------------------------------------


def test_extract_whole_scene():
    scene = random_scene()
    obj = extract_in_box(scene, 2, AABB([-2, -2, -2], [2, 2, 2]))
    np.testing.assert_array_equal(obj.points, scene.points)
    np.testing.assert_array_equal(obj.mask, (scene.instance_ids == 2).astype(np.uint8))
    assert obj.class_id == 1


def test_extract_empty_box():
    with pytest.raises(ExtractionEmptyError):
        extract_in_box(random_scene(), 1, AABB([5, 5, 5], [6, 6, 6]))


@pytest.mark.parametrize("seed", range(5))
def test_extract_matches_brute_force(seed):
    scene = random_scene(seed)
    rng = np.random.default_rng(seed + 100)
    lo = rng.uniform(-1, 0, 3)
    box = AABB(lo, lo + rng.uniform(0.5, 1.5, 3))
    obj = extract_in_box(scene, 1, box)
    expect = [i for i, p in enumerate(scene.points)
              if all(box.min_corner[c] <= p[c] <= box.max_corner[c] for c in range(3))]
    np.testing.assert_array_equal(obj.points, scene.points[expect])
    np.testing.assert_array_equal(obj.mask, [int(scene.instance_ids[i] == 1) for i in expect])


def test_extract_closed_box_boundary():
    pts = np.array([[0, 0, 0], [1, 1, 1], [1.0000001, 0.5, 0.5]], dtype=np.float32)
    scene = SceneRecord("b", pts, [1, 1, 0], {1: (0, AABB([0, 0, 0], [1, 1, 1]))})
    assert extract_in_box(scene, 1, AABB([0, 0, 0], [1, 1, 1])).count == 2


def test_strip_background():
    fg = ObjectInstance(np.ones((4, 3)), [1, 1, 1, 1], 0)
    assert strip_background(fg) == fg
    mixed = ObjectInstance(np.arange(300.0).reshape(100, 3), [1] * 30 + [0] * 70, 0)
    out = strip_background(mixed)
    assert out.count == 30 and out.mask.all()
    assert strip_background(out) == out


@pytest.mark.parametrize("seed", range(5))
def test_strip_extract_equals_direct_gather(seed):
    cfg = SynthConfig(num_objects=3)
    scene = synth_scene(cfg, seed)
    for iid, (_, box) in scene.instances.items():
        via = strip_background(extract_in_box(scene, iid, box))
        direct = scene.points[scene.instance_ids == iid]
        np.testing.assert_array_equal(via.points, direct)


# -- perturbation ---------------------------------------------------------------------


def test_perturb_identity():
    box = AABB([0, 0, 0], [1, 2, 3])
    out = perturb_box(box, PerturbSpec(0.0), seed=9)
    assert out.local == box and out.theta == 0.0 and out.aabb == box


def test_perturb_translation_bound():
    box = AABB([-1, -1, -1], [1, 1, 1])
    spec = PerturbSpec(0.25)
    for seed in range(10_000):
        shift = perturb_box(box, spec, seed).center - box.center
        assert np.all(np.abs(shift) <= 0.5)


def test_perturb_deterministic():
    box = AABB([0, 0, 0], [1, 2, 3])
    a = perturb_box(box, PERTURB_SPECS[VariantTag.PB_T50_RS], 42)
    b = perturb_box(box, PERTURB_SPECS[VariantTag.PB_T50_RS], 42)
    assert a.local == b.local and a.theta == b.theta


def test_perturb_rotation_refit_contains_rotated_corners():
    box = AABB([0, 0, 0], [2, 1, 1])
    pb = perturb_box(box, PerturbSpec(0.0, rotate=True), 3)
    assert 0 <= pb.theta < 2 * np.pi
    c = pb.center
    rot = np.array([[np.cos(pb.theta), -np.sin(pb.theta), 0], [np.sin(pb.theta), np.cos(pb.theta), 0], [0, 0, 1]])
    world = (box.corners() - c) @ rot.T + c
    assert np.all(pb.aabb.contains(world + 0 * 1e-12) | np.isclose(world, pb.aabb.min_corner).any(1)
                  | np.isclose(world, pb.aabb.max_corner).any(1))
    np.testing.assert_allclose(pb.to_frame(world), box.corners(), atol=1e-12)


def test_perturb_scale_range():
    box = AABB([0, 0, 0], [1, 1, 1])
    for seed in range(200):
        pb = perturb_box(box, PERTURB_SPECS[VariantTag.PB_T50_RS], seed)
        assert np.all((pb.scale >= 0.75) & (pb.scale <= 1.25))
        np.testing.assert_allclose(pb.local.extent, pb.scale)


def test_retention_threshold():
    pts = np.stack([np.arange(10.0), np.zeros(10), np.zeros(10)], axis=1)
    obj = ObjectInstance(pts, np.ones(10), 0)
    assert retention_ok(obj, AABB([-0.5, -1, -1], [4.5, 1, 1]))  # 5 of 10
    assert not retention_ok(obj, AABB([-0.5, -1, -1], [3.5, 1, 1]))  # 4 of 10
    assert retention_ok(obj, AABB.fit(pts))


# -- sampling and normalization --------------------------------------------------------------


def test_sample_permutation_when_equal():
    pts = np.random.default_rng(0).normal(size=(16, 3))
    out, _ = sample_to_n(pts, np.ones(16), 16, seed=1)
    assert sorted(map(tuple, out)) == sorted(map(tuple, pts))


def test_sample_single_point():
    out, mask = sample_to_n(np.array([[1.0, 2.0, 3.0]]), np.array([1]), 4, seed=0)
    np.testing.assert_array_equal(out, np.tile([[1.0, 2.0, 3.0]], (4, 1)))
    assert mask.tolist() == [1, 1, 1, 1]


def test_sample_reproducible_and_errors():
    pts = np.random.default_rng(0).normal(size=(50, 3))
    a, _ = sample_to_n(pts, np.ones(50), 20, seed=3)
    b, _ = sample_to_n(pts, np.ones(50), 20, seed=3)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        sample_to_n(np.zeros((0, 3)), np.zeros(0), 4)


@pytest.mark.parametrize("count,n", [(300, 128), (50, 128)])
def test_sample_preserves_mask_balance(count, n):
    rng = np.random.default_rng(0)
    mask = (rng.random(count) < 0.3).astype(np.uint8)
    pts = rng.normal(size=(count, 3))
    fractions = [sample_to_n(pts, mask, n, seed=s)[1].mean() for s in range(1000)]
    assert abs(np.mean(fractions) - mask.mean()) <= 0.02


def test_normalize_examples():
    out = normalize_unit(np.array([[1.0, 1, 1], [3, 1, 1]]))
    np.testing.assert_allclose(out, [[-1, 0, 0], [1, 0, 0]])
    np.testing.assert_array_equal(normalize_unit(np.array([[4.0, 5, 6]])), [[0, 0, 0]])


@pytest.mark.parametrize("seed", range(5))
def test_normalize_random(seed):
    pts = np.random.default_rng(seed).normal(3.0, 5.0, size=(10, 3))
    out = normalize_unit(pts)
    norms = [np.sqrt(sum(c * c for c in p)) for p in out]
    assert abs(max(norms) - 1.0) < 1e-12
    assert np.all(np.abs(out.mean(axis=0)) < 1e-6)
    assert np.all(np.abs(out) <= 1.0)
    np.testing.assert_allclose(normalize_unit(out), out, atol=1e-6)


# -- splitting ----------------------------------------------------------------------------


def _manifest(sizes, seed=0):
    entries = []
    for s, size in enumerate(sizes):
        for i in range(size):
            entries.append(ManifestEntry(f"s{s}/{i}.sobn", f"scene{s}", i % 3, VariantTag.OBJ_BG))
    return Manifest(tuple(entries))


def test_split_equal_scenes():
    out = split_by_scene(_manifest([5] * 10), 0.8, seed=1)
    assert len(out.split("train").scenes) == 8 and len(out.split("test").scenes) == 2


def test_split_single_scene():
    with pytest.raises(SplitError):
        split_by_scene(_manifest([7]), 0.8)


def test_split_fraction_and_determinism():
    m = _manifest(list(np.random.default_rng(0).integers(3, 8, size=40)))
    a = split_by_scene(m, 0.8, seed=4)
    assert a == split_by_scene(m, 0.8, seed=4)
    assert abs(len(a.split("train")) / len(a) - 0.8) <= 0.05


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 12), min_size=2, max_size=25), st.integers(0, 2**32))
def test_split_never_leaks_scenes(sizes, seed):
    out = split_by_scene(_manifest(sizes), 0.8, seed)
    train, test = set(out.split("train").scenes), set(out.split("test").scenes)
    assert train and test and not train & test
    assert len(out.split("train")) + len(out.split("test")) == len(out)


# -- augmentation -----------------------------------------------------------------------------


def test_augment_identity():
    pts = np.random.default_rng(0).normal(size=(20, 3))
    out = augment(pts, AugmentSpec(rotate_gravity=False, jitter_sigma=0.0, jitter_clip=0.0), seed=3)
    np.testing.assert_array_equal(out, pts)


def test_augment_rotation_is_isometry_about_z():
    pts = np.random.default_rng(0).normal(size=(30, 3))
    out = augment(pts, AugmentSpec(True, 0.0, 0.0), seed=5)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
    assert np.abs(d0 - d1).max() < 1e-6
    np.testing.assert_allclose(out[:, 2], pts[:, 2])


def test_augment_jitter_clipped():
    pts = np.zeros((100_000, 3))
    out = augment(pts, AugmentSpec(False, 0.02, 0.05), seed=0)
    assert np.abs(out).max() <= 0.05
    assert 0.015 < out.std() < 0.025


def test_augment_spec_validation():
    with pytest.raises(ValidationError):
        AugmentSpec(jitter_sigma=0.1, jitter_clip=0.05)


# -- synthetic scenes ----------------------------------------------------------------------------


def test_synth_single_object_no_walls():
    scene = synth_scene(SynthConfig(num_objects=1, walls=False), 0)
    assert set(np.unique(scene.instance_ids)) == {0, 1}
    # floor points stay near z = 0
    assert np.abs(scene.points[scene.instance_ids == 0, 2]).max() < 0.05


@pytest.mark.parametrize("seed", range(10))
def test_synth_boxes_contain_instances(seed):
    scene = synth_scene(SynthConfig(classes=("box", "cylinder", "sphere_cap", "l_bracket", "backed_box"),
                                    num_objects=5), seed)
    for iid, (_, box) in scene.instances.items():
        assert box.contains(scene.points[scene.instance_ids == iid]).all()


def test_synth_background_fraction():
    fractions = []
    for seed in range(100):
        scene = synth_scene(SynthConfig(), seed)
        for iid, (_, box) in scene.instances.items():
            fractions.append(1.0 - extract_in_box(scene, iid, box).mask.mean())
    assert 0.05 < np.mean(fractions) < 0.60
    assert 0.05 < min(fractions) and max(fractions) < 0.60


def test_synth_config_validation():
    with pytest.raises(ValidationError):
        SynthConfig(classes=("box",))
    with pytest.raises(ValidationError):
        SynthConfig(classes=("box", "teapot"))


def test_scene_files_round_trip(tmp_path):
    cfg = SynthConfig(num_objects=3)
    scene = synth_scene(cfg, 5, scene_id="s5")
    save_scene(scene, tmp_path, cfg.class_table)
    scenes, table = load_scenes(tmp_path)
    assert table == cfg.class_table
    back = scenes[0]
    assert back.scene_id == "s5"
    np.testing.assert_array_equal(back.points, scene.points)
    np.testing.assert_array_equal(back.instance_ids, scene.instance_ids)
    assert back.instances == scene.instances


# -- variant generation ----------------------------------------------------------------------------


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_generate_one_file_per_instance(tmp_path):
    scene = synth_scene(SynthConfig(num_objects=3), 1)
    assert len(scene.instances) == 3
    m = generate_variant([scene], VariantTag.OBJ_BG, tmp_path, 0)
    assert len(m) == 3
    assert len(list(tmp_path.rglob("*.sobn"))) == 3
    only = generate_variant([scene], VariantTag.OBJ_ONLY, tmp_path / "only", 0)
    assert len(only) == 3


def test_generate_perturbed_counts_and_determinism(tmp_path):
    scenes = [synth_scene(SynthConfig(), s, scene_id=f"s{s}") for s in range(4)]
    n = sum(len(s.instances) for s in scenes)
    m1 = generate_variant(scenes, VariantTag.PB_T50_RS, tmp_path / "a", 7)
    m2 = generate_variant(scenes, VariantTag.PB_T50_RS, tmp_path / "b", 7, workers=3)
    assert 0 < len(m1) <= 5 * n
    assert m1 == m2
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    m3 = generate_variant(scenes[::-1], VariantTag.PB_T50_RS, tmp_path / "c", 7)
    assert m3 == m1


def test_generate_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_variant([synth_scene(SynthConfig(num_objects=1), 0)], VariantTag.OBJ_BG, blocker / "sub", 0)
