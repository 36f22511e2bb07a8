"""``oclf`` command line: synth, train, eval, predict, sweep, report.

Exit codes: 0 ok, 1 other error, 2 I/O error (or bad usage), 3 degenerate
dataset, 4 missing checkpoint, 5 malformed weights file, 6 malformed history CSV.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import datasets as ds
from . import metrics as mt
from .errors import DegenerateDataset, InvalidInput, ModelNotLoaded, OclfError
from .facepatch import FaceLandmarks, ImageSample, OcclusionMask, PatchMode
from .fusion import EarlyExit, Models, PatchWeights, Path3, PipelineConfig, predict, trusted_path_from_validation, write_predictions
from .gramnet import preset

EXIT_OK, EXIT_ERROR, EXIT_IO, EXIT_DEGENERATE, EXIT_CHECKPOINT, EXIT_WEIGHTS, EXIT_CSV = 0, 1, 2, 3, 4, 5, 6

log = logging.getLogger("oclf")


class CliError(Exception):
    def __init__(self, message, code=EXIT_ERROR):
        super().__init__(message)
        self.code = code


def _block(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"block must look like 64x64, got {text!r}") from None
    return h, w


def _snapshot(args, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    snap = {k: v for k, v in vars(args).items() if k != "func"}
    (out / "config.json").write_text(json.dumps(snap, indent=2, sort_keys=True, default=str) + "\n")


def _weights(args) -> PatchWeights:
    pairs = {}
    for item in args.weight or []:
        name, _, value = item.partition("=")
        try:
            pairs[name] = int(value)
        except ValueError:
            raise CliError(f"bad --weight {item!r}; expected name=int", EXIT_WEIGHTS) from None
    try:
        return PatchWeights(pairs)
    except OclfError as exc:
        raise CliError(str(exc), EXIT_WEIGHTS) from None


def _pipeline(args, **overrides) -> PipelineConfig:
    kw = dict(
        patch_mode=PatchMode(args.patch_mode),
        block=tuple(args.block),
        canonical_side=args.canonical_side,
        weights=_weights(args),
        early_exit=EarlyExit(getattr(args, "early_exit", "off")),
        trusted_path=Path3(args.trusted_path) if getattr(args, "trusted_path", None) else None,
        exclude_occluded=args.exclude_occluded,
        concat_zero_occluded=args.concat_zero_occluded,
    )
    kw.update(overrides)
    return PipelineConfig(**kw)


def _load_models(path) -> Models:
    try:
        return Models.load(path)
    except (ModelNotLoaded, FileNotFoundError) as exc:
        raise CliError(str(exc), EXIT_CHECKPOINT) from None


# --- commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = ds.SynthConfig(
        n_train=args.n,
        n_val=args.n_val,
        n_test=args.n_test,
        image_side=args.side,
        artifact_kind=args.artifact,
        occlusion_probability=args.occlusion,
        seed=args.seed,
    )
    try:
        manifest = ds.generate_synthetic(cfg, args.out)
    except OSError as exc:
        raise CliError(f"IOError: {exc}", EXIT_IO) from None
    path = Path(args.out) / "manifest.jsonl"
    print(f"manifest: {path}")
    print(f"fingerprint: {manifest.fingerprint}")
    for split in ds.SPLITS:
        print(f"occlusion_ratio[{split}]: {mt.occlusion_ratio(manifest, split):.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import TrainConfig, train_all

    out = Path(args.out)
    _snapshot(args, out)
    manifest = ds.load_manifest(args.manifest)
    train = ds.split_view(manifest, "train")
    try:
        val = ds.split_view(manifest, "val")
    except ds.SplitMissing:
        val = None
    cfg = TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        momentum=args.momentum,
        seed=args.seed,
        class_weighted=args.class_weighted,
    )
    try:
        run = train_all(train, val, preset(args.preset), cfg, _pipeline(args), manifest.fingerprint, out)
    except DegenerateDataset as exc:
        raise CliError(f"DegenerateDataset: {exc}", EXIT_DEGENERATE) from None
    for name, h in run.histories.items():
        last_val = h.val_acc[-1]
        print(
            f"{name}: {len(h)} epochs, lr {cfg.learning_rate}, batch {cfg.batch_size}, "
            f"train_acc {h.train_acc[-1]:.2f}, val_acc {'-' if last_val is None else f'{last_val:.2f}'}, "
            f"best epoch {h.best_epoch}"
        )
    print(f"checkpoints: {out}")
    return EXIT_OK


def _evaluate(models, samples, pipeline):
    truth = [s.label for s in samples]
    results = predict(models, samples, pipeline)
    return results, truth


def cmd_eval(args) -> int:
    out = Path(args.out)
    _snapshot(args, out)
    models = _load_models(args.ckpt)
    manifest = ds.load_manifest(args.manifest)
    samples = ds.split_view(manifest, args.split)
    needs_trust = args.early_exit == EarlyExit.VALIDATED.value and not args.trusted_path
    pipeline = _pipeline(args, early_exit=EarlyExit.OFF) if needs_trust else _pipeline(args)
    if needs_trust:
        val = ds.split_view(manifest, "val")
        val_results, val_truth = _evaluate(models, val, _pipeline(args, early_exit=EarlyExit.OFF))
        trusted = trusted_path_from_validation(val_results, val_truth)
        print(f"validated early exit: trusted path = {trusted.value if trusted else 'none (full pipeline)'}")
        pipeline = _pipeline(args, early_exit=EarlyExit.VALIDATED if trusted else EarlyExit.OFF, trusted_path=trusted)
        models.whole_face_calls = 0

    results, truth = _evaluate(models, samples, pipeline)
    write_predictions(results, out / "predictions.jsonl")
    report = mt.evaluate_labels([r.final for r in results], truth)
    per_path = {}
    for p in Path3:
        labels = [r.label_of(p) for r in results]
        if all(lab is not None for lab in labels):
            per_path[p.value] = mt.evaluate_labels(labels, truth).to_dict()
    summary = {
        "split": args.split,
        "final": report.to_dict(),
        "paths": per_path,
        "per_patch_accuracy": mt.per_patch_accuracy_from_results(results, truth),
        "occlusion_ratio": mt.occlusion_ratio(manifest, args.split),
        "early_exit": pipeline.early_exit.value,
        "early_exited": sum(r.early_exited for r in results),
        "whole_face_forward_passes": models.whole_face_calls,
        "pipeline": pipeline.to_dict(),
    }
    mt.write_json(summary, out / "metrics.json")
    mt.write_confusion_csv(report.confusion, out / "confusion.csv")
    from .plotting import plot_confusion

    plot_confusion(report.confusion, out / "confusion.png")
    r = report.to_dict()
    print(
        f"{args.split}: n={r['n']} acc {r['accuracy']:.2f} P {r['macro_precision']:.2f} "
        f"R {r['macro_recall']:.2f} F {r['macro_f']:.2f} cm {r['confusion']}"
    )
    print(f"early exits: {summary['early_exited']}/{len(results)}; whole-face passes: {models.whole_face_calls}")
    print(f"results: {out}")
    return EXIT_OK


def _read_annotations(path):
    data = json.loads(Path(path).read_text())
    if isinstance(data, list):
        data = {"landmarks": data}
    return data


def cmd_predict(args) -> int:
    models = _load_models(args.ckpt)
    pixels = ds.read_image(args.image)
    ann = _read_annotations(args.annotations) if args.annotations else {}
    mask = None
    if ann.get("occlusion_mask") or args.mask:
        mask = OcclusionMask(ds.read_mask(args.mask or Path(args.annotations).parent / ann["occlusion_mask"]))
    sample = ImageSample(
        id=str(args.image),
        pixels=pixels,
        landmarks=FaceLandmarks(np.array(ann["landmarks"])) if "landmarks" in ann else None,
        occlusion=mask,
        face_box=tuple(ann["face_box"]) if ann.get("face_box") else None,
    )
    result = predict(models, [sample], _pipeline(args))[0]
    text = json.dumps(result.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    out = Path(args.out)
    _snapshot(args, out)
    try:
        configs = mt.read_weight_configs(args.weights_file)
    except (OSError, ValueError, OclfError) as exc:
        raise CliError(f"malformed weights file: {exc}", EXIT_WEIGHTS) from None
    models = _load_models(args.ckpt)
    manifest = ds.load_manifest(args.manifest)
    samples = ds.split_view(manifest, args.split)
    results, truth = _evaluate(models, samples, _pipeline(args, weights=PatchWeights(), early_exit=EarlyExit.OFF))
    rows = mt.weight_sweep(results, truth, configs)
    mt.write_sweep_csv(rows, out / "sweep.csv")
    mt.write_json(rows, out / "sweep.json")
    from .plotting import plot_sweep

    plot_sweep(rows, out / "sweep.png")
    for row in rows:
        print(f"{row['weights']:>28}: vote {row['total']:.2f} concat {row['concatenate']:.2f} final {row['final']:.2f}")
    print(f"results: {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .plotting import plot_histories
    from .trainer import TrainHistory

    histories = {}
    for p in args.histories:
        try:
            histories[Path(p).stem] = TrainHistory.from_csv(p)
        except (OSError, InvalidInput, KeyError) as exc:
            raise CliError(f"malformed history CSV {p}: {exc}", EXIT_CSV) from None
    out = Path(args.out)
    target = out if out.suffix == ".png" else out / "accuracy.png"
    plot_histories(histories, target, title=args.title)
    print(f"plot: {target}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def _add_pipeline_flags(p):
    p.add_argument("--patch-mode", choices=[m.value for m in PatchMode], default="semantic")
    p.add_argument("--block", type=_block, default=(64, 64), help="block size HxW for block mode")
    p.add_argument("--canonical-side", type=int, default=256)
    p.add_argument("--weight", action="append", metavar="PATCH=W", help="vote weight, repeatable")
    p.add_argument("--exclude-occluded", action="store_true", help="drop fully occluded patches from the vote")
    p.add_argument("--concat-zero-occluded", action="store_true", help="zero features of fully occluded patches")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oclf", description="Occlusion-aware patch-based fake face detector")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", help="JSON file whose keys override flags")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=200, help="train images per class")
    p.add_argument("--n-val", type=int, default=50)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--side", type=int, default=128)
    p.add_argument("--artifact", choices=["checkerboard", "ring-spectrum"], default="checkerboard")
    p.add_argument("--occlusion", type=float, default=0.3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train whole-face, patch and concat models")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=["toy", "default"], default="default")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--batch-size", type=int, default=15)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--class-weighted", action="store_true")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run the three-path pipeline over a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True, help="directory with whole/patch/concat checkpoints")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--early-exit", choices=[m.value for m in EarlyExit], default="off")
    p.add_argument("--trusted-path", choices=[Path3.CONCAT.value, Path3.PATCH_VOTE.value])
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--annotations", help="JSON with landmarks (68 pairs), optional face_box, occlusion_mask")
    p.add_argument("--mask", help="occlusion mask PNG")
    p.add_argument("--out")
    p.add_argument("--early-exit", choices=[m.value for m in EarlyExit], default="off")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="patch weight sweep")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--weights-file", required=True, help="JSON list of {patch: weight} objects")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="plot accuracy curves from history CSVs")
    p.add_argument("histories", nargs="+")
    p.add_argument("--out", required=True, help="PNG path or output directory")
    p.add_argument("--title", default="Accuracy per epoch")
    p.set_defaults(func=cmd_report)
    return parser


def _apply_config(args, parser):
    if not args.config:
        return args
    try:
        data = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read --config: {exc}", EXIT_IO) from None
    for key, value in data.items():
        attr = key.replace("-", "_")
        if attr == "block" and isinstance(value, str):
            value = _block(value)
        setattr(args, attr, value)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = _apply_config(args, parser)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ModelNotLoaded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DegenerateDataset as exc:
        print(f"error: DegenerateDataset: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except OclfError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: IOError: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
