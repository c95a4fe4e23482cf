"""Command line entry point: ``cloudclass generate|synth|train|eval|xeval|gradcheck|report``.

Exit status is 0 on success, 2 for invalid input or data, 3 for numeric failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import NumericError, grad_check
from .core import Manifest, ValidationError, VariantTag, derive_seed, load_manifest, save_manifest
from .enrich import PERTURB_SPECS, AugmentSpec, SynthConfig, generate_variant, iter_synth_scenes, load_scenes, \
    save_scene, split_by_scene
from .harness import (
    Checkpoint,
    EpochLog,
    TrainConfig,
    cross_evaluate,
    evaluate_dataset,
    export_report,
    load_dataset,
    read_metrics,
    train,
)
from .models import BGAConfig, build_model, default_config, desk_config, joint_loss, tiny_config

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3

MODEL_NAMES = {
    "pointnet": "POINTNET_VANILLA",
    "pnpp": "PNPP_VANILLA",
    "dgcnn": "DGCNN_VANILLA",
    "bga-pnpp": "BGA_PNPP",
    "bga-dgcnn": "BGA_DGCNN",
}
PRESETS = {"tiny": tiny_config, "desk": desk_config, "default": default_config}

log = logging.getLogger("cloudclass")


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _split_path(data: Path, split_id: int) -> Path:
    path = data / f"manifest.split{split_id}.tsv"
    if not path.exists():
        found = sorted(p.name for p in data.glob("manifest.split*.tsv"))
        raise ValidationError(f"no split {split_id} in {data} (available: {found or 'none'})")
    return path


def _class_names(data: Path) -> list[str] | None:
    path = data / "classes.txt"
    return path.read_text(encoding="utf-8").split() if path.exists() else None


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ValidationError(f"{path}: invalid JSON ({err})") from err


# -- commands -----------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(**{**_read_config(args.config).get("synth", {}),
                         **({"classes": tuple(args.classes.split(","))} if args.classes else {}),
                         **({"num_objects": args.objects} if args.objects else {})})
    out = Path(args.out)
    for scene in iter_synth_scenes(cfg, args.scenes, args.seed):
        save_scene(scene, out, cfg.class_table)
    print(f"wrote {args.scenes} scenes to {out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    variant = VariantTag(args.variant)
    scenes, table = load_scenes(args.scenes)
    if not scenes:
        raise ValidationError(f"no scenes found in {args.scenes}")
    spec = replace(PERTURB_SPECS[variant], samples_per_object=args.samples) if variant.perturbed else None
    out = Path(args.out)
    manifest = generate_variant(scenes, variant, out, args.seed, spec=spec, workers=args.workers)
    (out / "classes.txt").write_text("".join(n + "\n" for n in table.names), encoding="utf-8")
    for k in range(args.splits):
        split = split_by_scene(manifest, args.train_frac, derive_seed(args.seed, "split", k))
        save_manifest(split, out / f"manifest.split{k}.tsv")
    print(f"{variant.value}: {len(manifest)} objects from {len(scenes)} scenes, {args.splits} split(s) in {out}")
    return EXIT_OK


def _model_config(args, num_classes: int, file_cfg: dict) -> BGAConfig:
    if "model" in file_cfg:
        cfg = BGAConfig.from_dict(file_cfg["model"])
        if args.model:
            cfg = replace(cfg, variant=MODEL_NAMES[args.model])
    else:
        cfg = PRESETS[args.preset](MODEL_NAMES[args.model or "bga-pnpp"], num_classes,
                                   args.points or PRESETS[args.preset]().num_points)
    if args.points and cfg.num_points != args.points:
        raise ValidationError("--points conflicts with the configured model")
    if args.lam is not None:
        cfg = replace(cfg, lam=args.lam)
    return cfg.validate()


def cmd_train(args) -> int:
    data = Path(args.data)
    manifest = load_manifest(_split_path(data, args.split_id))
    variant = VariantTag(args.variant)
    manifest = Manifest(tuple(e for e in manifest if e.variant == variant))
    if not len(manifest):
        raise ValidationError(f"no {variant.value} objects in {data}")
    names = _class_names(data)
    num_classes = len(names) if names else 1 + max(e.class_id for e in manifest)
    file_cfg = _read_config(args.config)
    model_cfg = _model_config(args, num_classes, file_cfg)
    train_opts = dict(file_cfg.get("train", {}))
    if "augment" in train_opts:
        train_opts["augment"] = AugmentSpec(**train_opts["augment"]) if train_opts["augment"] else None
    for flag, key in (("epochs", "epochs"), ("batch", "batch_size"), ("lr", "lr")):
        if getattr(args, flag) is not None:
            train_opts[key] = getattr(args, flag)
    cfg = TrainConfig(model=model_cfg, variant=variant, seed=args.seed, **train_opts)
    ckpt, logs = train(manifest, cfg, data, class_names=names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save(out / "model.sobw")
    _write_logs(logs, out / "training_log.json")
    last = logs[-1]
    print(f"trained {model_cfg.variant} for {len(logs)} epochs: loss {last.loss_total:.4f}, "
          f"train OA {last.train_oa:.1f}% -> {out / 'model.sobw'}")
    return EXIT_OK


def _write_logs(logs, path: Path) -> None:
    path.write_text(json.dumps([vars(e) for e in logs], indent=1), encoding="utf-8")


def _read_logs(checkpoint: Path) -> list[EpochLog]:
    path = checkpoint.parent / "training_log.json"
    if not path.exists():
        return []
    return [EpochLog(**d) for d in json.loads(path.read_text(encoding="utf-8"))]


def _print_metrics(m) -> None:
    mask = "" if m.mask_accuracy is None else f", mask {m.mask_accuracy:.2f}%"
    excl = f", excluded {m.excluded}" if m.excluded else ""
    print(f"{m.num_objects} objects: OA {m.overall_accuracy:.2f}%, mAcc {m.mean_class_accuracy:.2f}%{mask}{excl}")


def cmd_eval(args) -> int:
    data = Path(args.data)
    ckpt = Checkpoint.load(args.checkpoint)
    manifest = load_manifest(_split_path(data, args.split_id))
    dataset = load_dataset(manifest, data, ckpt.config.num_points, args.split)
    metrics, preds = evaluate_dataset(ckpt, dataset)
    export_report(metrics, _read_logs(Path(args.checkpoint)), args.out, dataset, preds)
    _print_metrics(metrics)
    return EXIT_OK


def _parse_class_map(text: str, model_names, data_names) -> dict[int, int]:
    if text == "names":
        if not model_names or not data_names:
            raise ValidationError("--class-map names needs class names on both sides")
        return {data_names.index(n): model_names.index(n) for n in data_names if n in model_names}
    out = {}
    for pair in filter(None, text.split(",")):
        try:
            src, dst = pair.split(":")
            out[int(src)] = int(dst)
        except ValueError as err:
            raise ValidationError(f"bad class-map entry {pair!r}; expected SRC:DST") from err
    return out


def cmd_xeval(args) -> int:
    data = Path(args.data)
    ckpt = Checkpoint.load(args.checkpoint)
    manifest = load_manifest(_split_path(data, args.split_id))
    class_map = _parse_class_map(args.class_map, ckpt.class_names, _class_names(data))
    metrics = cross_evaluate(ckpt, manifest, class_map, data, split=args.split)
    export_report(metrics, [], args.out)
    _print_metrics(metrics)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    variants = ["BGA_PNPP", "BGA_DGCNN"] if args.model == "all" else [MODEL_NAMES[args.model]]
    results = {}
    failed = False
    for variant in variants:
        cfg = tiny_config(variant)
        model = build_model(cfg, seed=args.seed, dtype=np.float64)
        rng = np.random.default_rng(args.seed)
        x = rng.uniform(-1, 1, size=(args.batch, cfg.num_points, 3))
        labels = rng.integers(0, cfg.num_classes, size=args.batch)
        masks = rng.integers(0, 2, size=(args.batch, cfg.num_points))

        def loss():
            out = model(x, training=True, seed=args.seed)
            return joint_loss(out.class_logits, labels, out.mask_logits, masks, cfg.lam)[0]

        rep = grad_check(loss, {k: p.tensor for k, p in model.params.items()}, delta=args.delta, tol=args.tol,
                         max_elements=args.max_elements, seed=args.seed)
        results[variant] = {"max_rel_error": rep.max_rel_error, "checked": rep.checked, "skipped": rep.skipped,
                            "worst": list(rep.worst) if rep.worst else None, "passed": rep.passed}
        print(f"{variant}: max relative error {rep.max_rel_error:.3e} over {rep.checked} elements "
              f"({rep.skipped} skipped at kinks) -> {'ok' if rep.passed else 'FAIL'}")
        failed |= not rep.passed
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.json").write_text(json.dumps(results, indent=2), encoding="utf-8")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for path in args.metrics:
        p = Path(path)
        m = read_metrics(p / "metrics.json" if p.is_dir() else p)
        rows.append((str(path), m))
    fields = ["run", "objects", "overall_accuracy", "mean_class_accuracy", "mask_accuracy", "excluded"]
    table = [[name, m.num_objects, m.overall_accuracy, m.mean_class_accuracy, m.mask_accuracy, m.excluded]
             for name, m in rows]
    if len(rows) > 1:
        for label, fn in (("mean", np.mean), ("std", np.std)):
            cols = [[r[i] for r in table] for i in (2, 3, 4)]
            agg = [None if any(v is None for v in c) else float(fn(c)) for c in cols]
            table.append([label, sum(r[1] for r in table[:len(rows)]), *agg, None])
    fh = sys.stdout if args.out is None else open(args.out, "w", newline="", encoding="utf-8")
    try:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for r in table:
            writer.writerow(["" if v is None else (f"{v:.2f}" if isinstance(v, float) else v) for v in r])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_seed, default=0, help="global seed (unsigned 64-bit)")
    common.add_argument("--config", help="JSON file with 'synth', 'model' and/or 'train' sections")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cloudclass", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write procedural scenes")
    p.add_argument("--classes", help="comma separated shape names")
    p.add_argument("--objects", type=int, help="objects per scene")
    p.add_argument("--scenes", type=int, default=10, help="number of scenes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("generate", parents=[common], help="extract one dataset variant from scenes")
    p.add_argument("--scenes", required=True, help="directory of scene files")
    p.add_argument("--variant", required=True, choices=[v.value for v in VariantTag])
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=5, help="perturbed samples per object (perturbed variants)")
    p.add_argument("--splits", type=int, default=1, help="number of scene-level train/test splits to write")
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train a classifier")
    p.add_argument("--data", required=True, help="directory written by 'generate'")
    p.add_argument("--split-id", type=int, default=0)
    p.add_argument("--variant", default=VariantTag.PB_T50_RS.value, choices=[v.value for v in VariantTag])
    p.add_argument("--model", choices=sorted(MODEL_NAMES))
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--points", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint and export a report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split-id", type=int, default=0)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("xeval", parents=[common], help="evaluate on another dataset through a class map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--class-map", required=True, help="'SRC:DST,...' or 'names' to match class names")
    p.add_argument("--split-id", type=int, default=0)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_xeval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the BGA networks")
    p.add_argument("--model", choices=["bga-pnpp", "bga-dgcnn", "all"], default="all")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-elements", type=int, default=6, help="elements probed per parameter tensor")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", parents=[common], help="tabulate metrics.json files")
    p.add_argument("metrics", nargs="+", help="metrics.json files or report directories")
    p.add_argument("--out", help="CSV file (default stdout)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
