import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from cloudclass import autodiff as ad
from cloudclass.core import Manifest, ValidationError, VariantTag, write_object
from cloudclass.enrich import AugmentSpec, SynthConfig, generate_variant, split_by_scene, strip_background, synth_scene
from cloudclass.core import read_object
from cloudclass.harness import (
    Checkpoint,
    Metrics,
    TrainConfig,
    cross_evaluate,
    evaluate,
    evaluate_dataset,
    export_report,
    load_dataset,
    metrics_from_predictions,
    predict,
    read_metrics,
    train,
)
from cloudclass.models import tiny_config

import oracles


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = SynthConfig(classes=("box", "cylinder", "sphere_cap"), num_objects=3)
    scenes = [synth_scene(cfg, s, scene_id=f"scene{s:04d}") for s in range(6)]
    manifest = split_by_scene(generate_variant(scenes, VariantTag.OBJ_BG, root / "bg", 0), 0.8, seed=0)
    for e in manifest:
        obj = read_object(root / "bg" / e.path, scene_id=e.scene_id, variant=e.variant)
        (root / "nobg" / e.path).parent.mkdir(parents=True, exist_ok=True)
        write_object(strip_background(obj), root / "nobg" / e.path)
    return root, manifest


def small_cfg(**kw):
    base = dict(model=tiny_config("BGA_PNPP", num_classes=3), epochs=2, batch_size=4, seed=1)
    base.update(kw)
    return TrainConfig(**base)


# -- training -------------------------------------------------------------------------------------


def test_one_epoch_four_objects_batch_two(corpus):
    root, manifest = corpus
    train_entries = manifest.split("train").entries[:4]
    ckpt, logs = train(Manifest(train_entries), small_cfg(epochs=1, batch_size=2), root / "bg")
    assert len(logs) == 1 and logs[0].steps == 2
    assert np.isfinite([logs[0].loss_total, logs[0].loss_class, logs[0].loss_seg]).all()


def test_remainder_of_one_is_dropped(corpus):
    root, manifest = corpus
    ckpt, logs = train(Manifest(manifest.split("train").entries[:5]), small_cfg(epochs=1, batch_size=2), root / "bg")
    assert logs[0].steps == 2


def test_training_is_deterministic(corpus):
    root, manifest = corpus
    a, la = train(manifest, small_cfg(), root / "bg")
    b, lb = train(manifest, small_cfg(), root / "bg")
    assert a.to_bytes() == b.to_bytes()
    assert [x.loss_total for x in la] == [x.loss_total for x in lb]


def test_joint_loss_logged(corpus):
    root, manifest = corpus
    _, logs = train(manifest, small_cfg(epochs=1), root / "bg")
    e = logs[0]
    assert abs(e.loss_total - (e.loss_class + 0.5 * e.loss_seg)) < 1e-6


def test_train_config_invariants():
    with pytest.raises(ValidationError):
        small_cfg(batch_size=1)
    with pytest.raises(ValidationError):
        small_cfg(epochs=0)
    cfg = small_cfg(lr=1e-3)
    assert cfg.learning_rate(19) == 1e-3 and cfg.learning_rate(20) == pytest.approx(7e-4)


def test_empty_train_split(corpus):
    root, manifest = corpus
    with pytest.raises(ValidationError):
        train(manifest.split("test"), small_cfg(), root / "bg")


def test_numeric_error_has_context(corpus):
    root, manifest = corpus
    with pytest.raises(ad.NumericError, match="epoch 0 batch 0: adam_step"):
        train(manifest, small_cfg(lr=1e300, epochs=2), root / "bg")


def test_early_stop(corpus):
    root, manifest = corpus
    _, logs = train(manifest, small_cfg(epochs=30, early_stop_patience=2, early_stop_delta=1e9), root / "bg")
    # the first epoch always sets the best loss, then two stale epochs stop the run
    assert len(logs) == 3


# -- metrics -----------------------------------------------------------------------------------


def test_metrics_all_correct():
    m = metrics_from_predictions([0, 1, 1, 0], [0, 1, 1, 0], 2)
    assert m.overall_accuracy == 100.0 and m.mean_class_accuracy == 100.0


def test_metrics_half():
    labels = [0] * 10 + [1] * 10
    m = metrics_from_predictions(labels, [0] * 20, 2)
    assert m.overall_accuracy == 50.0 and m.mean_class_accuracy == 50.0
    assert m.confusion.tolist() == [[10, 0], [10, 0]]


def test_metrics_imbalanced_oa_differs_from_macc():
    labels = [0] * 90 + [1] * 10
    m = metrics_from_predictions(labels, [0] * 100, 2)
    assert m.overall_accuracy == 90.0 and m.mean_class_accuracy == 50.0


def test_metrics_absent_class_and_errors():
    m = metrics_from_predictions([0, 0, 2], [0, 1, 2], 3, class_names=["a", "b", "c"])
    assert m.absent_classes == ["b"] and m.per_class_accuracy[1] is None
    assert m.mean_class_accuracy == 75.0
    with pytest.raises(ValidationError):
        metrics_from_predictions([0, 3], [0, 0], 3)
    with pytest.raises(ValidationError):
        metrics_from_predictions([], [], 3)


@pytest.mark.parametrize("seed", range(20))
def test_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 8))
    n = int(rng.integers(1, 200))
    probs = rng.dirichlet(np.ones(c) * 0.5)
    labels = rng.choice(c, n, p=probs)
    preds = np.where(rng.random(n) < 0.6, labels, rng.integers(0, c, n))
    mt = rng.integers(0, 2, (n, 16))
    mp = rng.integers(0, 2, (n, 16))
    m = metrics_from_predictions(labels, preds, c, mask_true=mt, mask_pred=mp)
    assert m.confusion.tolist() == oracles.confusion(labels, preds, c).tolist()
    _, oa, macc = oracles.accuracies(labels, preds, c)
    assert abs(m.overall_accuracy - oa) < 1e-9 and abs(m.mean_class_accuracy - macc) < 1e-9
    wrong = sum(1 for a, b in zip(mt.ravel(), mp.ravel()) if a != b)
    assert abs(m.mask_accuracy - 100.0 * (1 - wrong / mt.size)) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_oa_invariant_under_relabeling(seed):
    rng = np.random.default_rng(seed)
    labels, preds = rng.integers(0, 5, 80), rng.integers(0, 5, 80)
    perm = rng.permutation(5)
    a = metrics_from_predictions(labels, preds, 5)
    b = metrics_from_predictions(perm[labels], perm[preds], 5)
    assert a.overall_accuracy == b.overall_accuracy
    assert a.mean_class_accuracy == pytest.approx(b.mean_class_accuracy)


def test_metrics_invariants():
    rng = np.random.default_rng(0)
    labels, preds = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
    m = metrics_from_predictions(labels, preds, 4)
    assert m.confusion.sum() == 50
    assert m.confusion.sum(axis=1).tolist() == np.bincount(labels, minlength=4).tolist()
    assert 0 <= m.overall_accuracy <= 100 and 0 <= m.mean_class_accuracy <= 100


# -- evaluation ----------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(corpus):
    root, manifest = corpus
    ckpt, logs = train(manifest, small_cfg(epochs=2), root / "bg", class_names=["box", "cylinder", "sphere_cap"])
    return ckpt, logs


def test_evaluate_is_pure(corpus, trained):
    root, manifest = corpus
    ckpt, _ = trained
    a = evaluate(ckpt, manifest, "test", root / "bg")
    b = evaluate(ckpt, manifest, "test", root / "bg")
    assert a == b
    assert a.num_objects == len(manifest.split("test"))
    assert a.class_names == ["box", "cylinder", "sphere_cap"]


def test_mask_accuracy_matches_loop(corpus, trained):
    root, manifest = corpus
    ckpt, _ = trained
    data = load_dataset(manifest, root / "bg", ckpt.config.num_points, "test")
    model = ckpt.model()
    out = model(data.points)
    right = total = 0
    for i in range(len(data)):
        for j in range(data.points.shape[1]):
            pred = int(out.mask_logits.data[i, j, 1] > out.mask_logits.data[i, j, 0])
            right += pred == data.masks[i, j]
            total += 1
    metrics, _ = evaluate_dataset(ckpt, data)
    assert abs(metrics.mask_accuracy - 100.0 * right / total) < 1e-9


def test_evaluate_rejects_too_few_outputs(corpus, trained):
    root, manifest = corpus
    ckpt, _ = trained
    small = Checkpoint(replace(ckpt.config, num_classes=2), ckpt.state)
    with pytest.raises(ValidationError):
        evaluate(small, manifest, "test", root / "bg")


def test_checkpoint_save_load(tmp_path, trained, corpus):
    root, manifest = corpus
    ckpt, _ = trained
    ckpt.save(tmp_path / "w.sobw")
    back = Checkpoint.load(tmp_path / "w.sobw")
    assert back.to_bytes() == ckpt.to_bytes() and back.config == ckpt.config
    assert evaluate(back, manifest, "test", root / "bg") == evaluate(ckpt, manifest, "test", root / "bg")


def test_cross_evaluate_identity_equals_evaluate(corpus, trained):
    root, manifest = corpus
    ckpt, _ = trained
    x = cross_evaluate(ckpt, manifest, {0: 0, 1: 1, 2: 2}, root / "bg")
    assert x == evaluate(ckpt, manifest, "test", root / "bg")


def test_cross_evaluate_errors_and_exclusions(corpus, trained):
    root, manifest = corpus
    ckpt, _ = trained
    with pytest.raises(ValidationError):
        cross_evaluate(ckpt, manifest, {}, root / "bg")
    with pytest.raises(ValidationError):
        cross_evaluate(ckpt, manifest, {0: 1, 1: 1}, root / "bg")
    test = manifest.split("test")
    partial = cross_evaluate(ckpt, manifest, {0: 0, 2: 2}, root / "bg")
    dropped = sum(1 for e in test if e.class_id == 1)
    assert partial.excluded == dropped and partial.num_objects == len(test) - dropped


def test_cross_evaluate_stripped_data(corpus, trained):
    root, manifest = corpus
    ckpt, _ = trained
    m = cross_evaluate(ckpt, manifest, {0: 0, 1: 1, 2: 2}, root / "nobg")
    assert m.excluded == 0 and m.num_objects == len(manifest.split("test"))


# -- reports --------------------------------------------------------------------------------------


def test_export_report(tmp_path, corpus, trained):
    root, manifest = corpus
    ckpt, logs = trained
    data = load_dataset(manifest, root / "bg", ckpt.config.num_points, "test")
    metrics, preds = evaluate_dataset(ckpt, data)
    export_report(metrics, logs, tmp_path / "r", data, preds)
    saved = json.loads((tmp_path / "r" / "metrics.json").read_text())
    with open(tmp_path / "r" / "confusion.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][1:] == metrics.class_names
    assert [sum(map(int, r[1:])) for r in rows[1:]] == np.sum(saved["confusion"], axis=1).tolist()
    assert read_metrics(tmp_path / "r" / "metrics.json") == metrics
    assert len(list((tmp_path / "r" / "masks").glob("*.sobn"))) == len(data)
    with open(tmp_path / "r" / "training_log.csv") as fh:
        assert len(list(csv.reader(fh))) == len(logs) + 1


def test_export_empty_writes_nothing(tmp_path):
    empty = Metrics(np.zeros((2, 2), dtype=np.int64), ["a", "b"], 0.0, 0.0, [None, None])
    with pytest.raises(ValidationError):
        export_report(empty, [], tmp_path / "r")
    assert not (tmp_path / "r").exists()


def test_predict_no_augmentation_or_dropout(corpus, trained):
    root, manifest = corpus
    ckpt, _ = trained
    data = load_dataset(manifest, root / "bg", ckpt.config.num_points, "test")
    model = ckpt.model()
    a = predict(model, data.points, batch_size=2)
    b = predict(model, data.points, batch_size=64)
    assert np.array_equal(a.classes, b.classes) and np.array_equal(a.masks, b.masks)


def test_augment_can_be_disabled(corpus):
    root, manifest = corpus
    _, la = train(manifest, small_cfg(epochs=1, augment=None), root / "bg")
    _, lb = train(manifest, small_cfg(epochs=1, augment=AugmentSpec()), root / "bg")
    assert la[0].loss_total != lb[0].loss_total
