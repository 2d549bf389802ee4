"""Command-line pipeline: synth, normalize, tile, train-patch, infer-maps, train-fusion,
predict, evaluate, cv.

Exit codes: 0 success, 1 usage error, 2 data/model error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .evaluation import CVReport, evaluate_models, run_cv, stratified_kfold, write_report
from .fusion import VOTE_ALIASES, FusionSpec, ProbabilityMap, fuse_mlp, fuse_vote, predict_image
from .patchnet import desk_spec
from .stain import REFERENCE_PROFILE, StainError, StainProfile, normalize_image
from .tensor import NumericalError
from .tiling import (DatasetManifest, ManifestEntry, SynthSpec, center_crop_to_grid, extract_patches,
                     read_image, synth_dataset, write_image)
from .train import (Checkpoint, CheckpointError, FusionHyper, PatchHyper, fit_fusion, infer_probability_map,
                    load_fusion, load_patchnet, prepare_image, train_fusion_stage, train_patch_stage,
                    write_loss_log, _reference_from_stats)

log = logging.getLogger("patchfusion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "synth": dict(classes=4, per_class=10, height=192, width=256, patch_size=64, informative=None,
                  background_class=0, test_fraction=0.0),
    "normalize": dict(reference=None),
    "tile": dict(patch_size=64, stride=None),
    "train-patch": dict(epochs=20, batch_size=32, lr=1e-3, patch_size=64, channels="8,16,32,64",
                        stride=None, no_augment=False, no_normalize=False, split="train", reference=None),
    "infer-maps": dict(copies=1, split="all"),
    "train-fusion": dict(maps=None, manifest=None, patch_ckpt=None, epochs=30, batch_size=32, lr=1e-3,
                         hidden="128,64,32", dropout=0.5, copies=8, split="train"),
    "predict": dict(fusion="mlp", map_out=None, resize_to_grid=False),
    "evaluate": dict(split="test"),
    "cv": dict(folds=10, epochs=20, batch_size=32, lr=1e-3, patch_size=64, channels="8,16,32,64",
               stride=None, no_augment=False, no_normalize=False, fusion_epochs=30, copies=8,
               hidden="128,64,32", dropout=0.5),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in str(text).split(","))


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = _Parser(add_help=False)
    common.add_argument("--config", default=S, help="TOML file; flags override its values")
    common.add_argument("--seed", type=int, default=S, help="RNG seed (fallback: $PATCHFUSION_SEED, then 0)")
    common.add_argument("--threads", type=int, default=S, help="worker threads; 1 is bitwise deterministic")
    common.add_argument("-v", "--verbose", action="store_true", default=S)

    p = _Parser(prog="patchfusion", description="Patch residual network + spatial fusion classifier.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def cmd(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, argument_default=S)

    c = cmd("synth", "generate a synthetic H&E-like dataset")
    c.add_argument("--out", required=True)
    c.add_argument("--classes", type=int)
    c.add_argument("--per-class", type=int)
    c.add_argument("--height", type=int)
    c.add_argument("--width", type=int)
    c.add_argument("--patch-size", type=int)
    c.add_argument("--informative", type=int, help="informative grid cells per image (rest background)")
    c.add_argument("--background-class", type=int)
    c.add_argument("--test-fraction", type=float)

    c = cmd("normalize", "Macenko-normalize every image of a manifest")
    c.add_argument("--manifest", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--reference", help="stain profile JSON (default: built-in H&E reference)")

    c = cmd("tile", "cut one image into patches")
    c.add_argument("--image", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--patch-size", type=int)
    c.add_argument("--stride", type=int)

    for name, help_ in (("train-patch", "train the patch residual network"),
                        ("cv", "stratified k-fold cross-validation of the full pipeline")):
        c = cmd(name, help_)
        c.add_argument("--manifest", required=True)
        c.add_argument("--out", required=True)
        c.add_argument("--epochs", type=int)
        c.add_argument("--batch-size", type=int)
        c.add_argument("--lr", type=float)
        c.add_argument("--patch-size", type=int)
        c.add_argument("--channels", help="four comma-separated group widths")
        c.add_argument("--stride", type=int, help="training patch stride (default patch_size/2)")
        c.add_argument("--no-augment", action="store_true")
        c.add_argument("--no-normalize", action="store_true")
        if name == "train-patch":
            c.add_argument("--split", help="manifest split to train on ('all' for every entry)")
            c.add_argument("--reference", help="stain profile JSON")
        else:
            c.add_argument("--folds", type=int)
            c.add_argument("--fusion-epochs", type=int)
            c.add_argument("--copies", type=int)
            c.add_argument("--hidden")
            c.add_argument("--dropout", type=float)

    c = cmd("infer-maps", "materialize probability maps with a frozen patch network")
    c.add_argument("--manifest", required=True)
    c.add_argument("--patch-ckpt", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--copies", type=int, help="augmented copies per image (1 = original only)")
    c.add_argument("--split")

    c = cmd("train-fusion", "train the spatial fusion network")
    c.add_argument("--out", required=True)
    c.add_argument("--maps", help="maps.csv written by infer-maps")
    c.add_argument("--manifest")
    c.add_argument("--patch-ckpt")
    c.add_argument("--epochs", type=int)
    c.add_argument("--batch-size", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--hidden")
    c.add_argument("--dropout", type=float)
    c.add_argument("--copies", type=int)
    c.add_argument("--split")

    c = cmd("predict", "classify one image")
    c.add_argument("--image", required=True)
    c.add_argument("--patch-ckpt", required=True)
    c.add_argument("--fusion-ckpt", required=True)
    c.add_argument("--fusion", help="mlp | vote:majority | vote:max | vote:sum")
    c.add_argument("--map-out", help="write the probability map CSV here")
    c.add_argument("--resize-to-grid", action="store_true",
                   help="center-crop to the largest tileable region")

    c = cmd("evaluate", "evaluate trained checkpoints on a manifest split")
    c.add_argument("--manifest", required=True)
    c.add_argument("--patch-ckpt", required=True)
    c.add_argument("--fusion-ckpt", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--split")
    return p


def _load_toml(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def resolve_config(args: argparse.Namespace) -> dict:
    given = {k: v for k, v in vars(args).items() if k != "command"}
    cfg = dict(DEFAULTS.get(args.command, {}))
    cfg.update(threads=1, verbose=False)
    if "config" in given:
        data = _load_toml(given["config"])
        section = data.get(args.command, {})
        flat = {k: v for k, v in data.items() if not isinstance(v, dict)}
        for src in (flat, section):
            cfg.update({k.replace("-", "_"): v for k, v in src.items()})
    cfg.update(given)
    if "seed" not in cfg:
        cfg["seed"] = int(os.environ.get("PATCHFUSION_SEED", 0))
    cfg["command"] = args.command
    return cfg


def _record_config(cfg: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{cfg['command']}.config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _limit_blas_threads() -> None:
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(1)


def _pmap(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def _select(manifest: DatasetManifest, split: str) -> DatasetManifest:
    sub = manifest if split in (None, "all") else manifest.subset(split=split)
    if len(sub) == 0:
        raise ValueError(f"manifest has no entries in split {split!r}")
    return sub


# ---------------------------------------------------------------- commands

def cmd_synth(cfg):
    spec = SynthSpec(num_classes=cfg["classes"], per_class=cfg["per_class"], height=cfg["height"],
                     width=cfg["width"], patch_size=cfg["patch_size"], seed=cfg["seed"],
                     informative=cfg["informative"], background_class=cfg["background_class"],
                     test_fraction=cfg["test_fraction"])
    m = synth_dataset(spec, cfg["out"])
    _record_config(cfg, cfg["out"])
    print(f"wrote {len(m)} images to {cfg['out']}")


def _reference(cfg) -> StainProfile:
    return StainProfile.load(cfg["reference"]) if cfg.get("reference") else REFERENCE_PROFILE


def cmd_normalize(cfg):
    manifest = DatasetManifest.load(cfg["manifest"])
    out = Path(cfg["out"])
    (out / "images").mkdir(parents=True, exist_ok=True)
    ref = _reference(cfg)

    def one(entry):
        img = normalize_image(read_image(manifest.resolve(entry)), ref)
        rel = f"images/{Path(entry.path).stem}.png"
        write_image(out / rel, img)
        return ManifestEntry(rel, entry.label, entry.split)

    entries = _pmap(one, manifest.entries, cfg["threads"])
    DatasetManifest(entries, manifest.class_names, out).save(out / "manifest.csv")
    ref.save(out / "reference_profile.json")
    _record_config(cfg, out)
    print(f"normalized {len(entries)} images into {out}")


def cmd_tile(cfg):
    img = read_image(cfg["image"])
    size = cfg["patch_size"]
    grid = extract_patches(img, size, cfg["stride"] or size)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "offsets.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "row", "col", "x", "y", "file"])
        for n, (patch, (x, y)) in enumerate(zip(grid.patches, grid.offsets)):
            name = f"patch_{n:04d}.png"
            write_image(out / name, patch)
            w.writerow([n, n // grid.cols, n % grid.cols, x, y, name])
    _record_config(cfg, out)
    print(f"{grid.rows}x{grid.cols} grid, {len(grid)} patches")


def _patch_setup(cfg, num_classes):
    spec = desk_spec(cfg["patch_size"], _ints(cfg["channels"]), num_classes)
    hyper = PatchHyper(lr=cfg["lr"], batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                       stride=cfg["stride"], augment=not cfg["no_augment"],
                       normalize_stains=not cfg["no_normalize"])
    return spec, hyper


def cmd_train_patch(cfg):
    manifest = _select(DatasetManifest.load(cfg["manifest"]), cfg["split"])
    spec, hyper = _patch_setup(cfg, manifest.num_classes)
    ckpt, rows = train_patch_stage(manifest, spec, hyper, cfg["seed"], reference=_reference(cfg))
    out = Path(cfg["out"])
    _record_config(cfg, out)
    ckpt.save(out / "patch.ckpt")
    write_loss_log(rows, out / "patch_loss.csv")
    print(json.dumps({"checkpoint": str(out / "patch.ckpt"),
                      "train_patch_accuracy": ckpt.metadata.get("train_patch_accuracy")}))


def _prepared(manifest, entry, stats):
    return prepare_image(read_image(manifest.resolve(entry)), stats.get("normalize_stains", True),
                         _reference_from_stats(stats))


def cmd_infer_maps(cfg):
    from .train import augmented_maps
    manifest = _select(DatasetManifest.load(cfg["manifest"]), cfg["split"])
    ckpt = Checkpoint.load(cfg["patch_ckpt"])
    model = load_patchnet(ckpt)
    out = Path(cfg["out"])
    (out / "maps").mkdir(parents=True, exist_ok=True)

    def one(item):
        i, entry = item
        img = _prepared(manifest, entry, ckpt.stats)
        return augmented_maps(model, ckpt.stats, img, cfg["copies"], (cfg["seed"], 3, i))

    all_maps = _pmap(one, list(enumerate(manifest.entries)), cfg["threads"])
    with open(out / "maps.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "split"])
        for entry, maps in zip(manifest.entries, all_maps):
            for c, m in enumerate(maps):
                rel = f"maps/{Path(entry.path).stem}_a{c}.csv"
                m.to_csv(out / rel)
                w.writerow([rel, entry.label, entry.split])
    _record_config(cfg, out)
    print(f"wrote {sum(len(m) for m in all_maps)} maps to {out / 'maps'}")


def _fusion_setup(cfg, grid, k):
    spec = FusionSpec(grid=tuple(grid), num_classes=k, hidden_sizes=_ints(cfg["hidden"]),
                      dropout_p=cfg["dropout"])
    hyper = FusionHyper(lr=cfg["lr"], batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                        copies=cfg["copies"])
    return spec, hyper


def cmd_train_fusion(cfg):
    out = Path(cfg["out"])
    if cfg.get("maps"):
        maps_path = Path(cfg["maps"])
        with open(maps_path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh)
                    if cfg["split"] in (None, "all") or r["split"] == cfg["split"]]
        if not rows:
            raise ValueError(f"{maps_path}: no maps in split {cfg['split']!r}")
        maps = [ProbabilityMap.from_csv(maps_path.parent / r["path"]) for r in rows]
        labels = [int(r["label"]) for r in rows]
        spec, hyper = _fusion_setup(cfg, maps[0].values.shape[:2], maps[0].num_classes)
        model, log_rows = fit_fusion(maps, labels, spec, hyper, cfg["seed"])
        from .train import fusion_checkpoint
        ckpt = fusion_checkpoint(model, {"seed": cfg["seed"], "epoch": hyper.epochs,
                                         "loss_history": [r["loss"] for r in log_rows],
                                         "hyper": asdict(hyper), "num_maps": len(maps)})
    else:
        if not (cfg.get("manifest") and cfg.get("patch_ckpt")):
            raise UsageError("train-fusion needs --maps, or --manifest with --patch-ckpt")
        manifest = _select(DatasetManifest.load(cfg["manifest"]), cfg["split"])
        pck = Checkpoint.load(cfg["patch_ckpt"])
        size = pck.spec["input_size"]
        first = _prepared(manifest, manifest.entries[0], pck.stats)
        grid = (first.shape[0] // size, first.shape[1] // size)
        spec, hyper = _fusion_setup(cfg, grid, manifest.num_classes)
        ckpt, log_rows = train_fusion_stage(pck, manifest, spec, hyper, cfg["seed"])
    _record_config(cfg, out)
    ckpt.save(out / "fusion.ckpt")
    write_loss_log(log_rows, out / "fusion_loss.csv")
    print(json.dumps({"checkpoint": str(out / "fusion.ckpt"), "final_loss": log_rows[-1]["loss"]
                      if log_rows else None}))


def predict(image_path, patch_ckpt, fusion_ckpt, fusion: str = "mlp", map_out=None,
            resize_to_grid: bool = False) -> dict:
    """Stain-normalize, tile, infer patch probabilities, fuse, and take the MAP label."""
    pck, fck = Checkpoint.load(patch_ckpt), Checkpoint.load(fusion_ckpt)
    patch_model, fusion_model = load_patchnet(pck), load_fusion(fck)
    size = patch_model.spec.input_size
    img = read_image(image_path)
    h, w = img.shape[:2]
    if h % size or w % size:
        if not resize_to_grid:
            raise ValueError(f"{image_path}: {h}x{w} image is not tileable by {size}px patches; "
                             f"use --resize-to-grid to center-crop")
        img = center_crop_to_grid(img, size)
    img = prepare_image(img, pck.stats.get("normalize_stains", True), _reference_from_stats(pck.stats))
    pmap = infer_probability_map(patch_model, pck.stats, img)
    if map_out:
        pmap.to_csv(map_out)
    if fusion == "mlp":
        probs = fuse_mlp(fusion_model, pmap)
        label = predict_image(probs)
    elif fusion.startswith("vote:") and fusion[5:] in VOTE_ALIASES:
        label = fuse_vote(pmap, fusion[5:])
        probs = np.bincount(pmap.fibers().argmax(axis=1), minlength=pmap.num_classes) / len(pmap.fibers())
    else:
        raise UsageError(f"unknown fusion mode {fusion!r}")
    result = {"image": str(image_path), "fusion": fusion, "label": label,
              "probs": [float(v) for v in probs], "map": pmap.values.tolist()}
    if pmap.num_classes == 4:
        non, car = float(probs[0] + probs[1]), float(probs[2] + probs[3])
        result["probs_2class"] = [non, car]
    return result


def cmd_predict(cfg):
    result = predict(cfg["image"], cfg["patch_ckpt"], cfg["fusion_ckpt"], cfg["fusion"], cfg["map_out"],
                     cfg["resize_to_grid"])
    print(json.dumps(result))


def cmd_evaluate(cfg):
    manifest = _select(DatasetManifest.load(cfg["manifest"]), cfg["split"])
    pck, fck = Checkpoint.load(cfg["patch_ckpt"]), Checkpoint.load(cfg["fusion_ckpt"])
    res = evaluate_models(pck, fck, manifest)
    from .evaluation import confusion_and_accuracy, roc_auc
    metrics = {"fold": 0, **res.metrics(manifest.num_classes)}
    cm, _ = confusion_and_accuracy(res.preds, res.labels, manifest.num_classes)
    points, auc = [], float("nan")
    if manifest.num_classes == 4:
        y2 = (res.labels >= 2).astype(int)
        if 0 < y2.sum() < len(y2):
            auc, points = roc_auc(res.probs[:, 2] + res.probs[:, 3], y2)
    plan = stratified_kfold(np.zeros(len(manifest), dtype=int), 1, cfg["seed"])
    summary = {k + "_mean": v for k, v in metrics.items() if k not in ("fold", "n")}
    write_report(CVReport([metrics], summary, cm.counts, points, auc, plan), cfg["out"], manifest.class_names)
    _record_config(cfg, cfg["out"])
    print(json.dumps(metrics))


def cmd_cv(cfg):
    manifest = DatasetManifest.load(cfg["manifest"])
    patch_spec, patch_hyper = _patch_setup(cfg, manifest.num_classes)
    first = read_image(manifest.resolve(manifest.entries[0]))
    grid = (first.shape[0] // cfg["patch_size"], first.shape[1] // cfg["patch_size"])
    fusion_spec = FusionSpec(grid=grid, num_classes=manifest.num_classes, hidden_sizes=_ints(cfg["hidden"]),
                             dropout_p=cfg["dropout"])
    fusion_hyper = FusionHyper(lr=cfg["lr"], batch_size=cfg["batch_size"], epochs=cfg["fusion_epochs"],
                               copies=cfg["copies"])
    _record_config(cfg, cfg["out"])
    report = run_cv(manifest, cfg["folds"], patch_spec, fusion_spec, patch_hyper, fusion_hyper,
                    cfg["seed"], cfg["out"])
    print(json.dumps(report.summary))


COMMANDS = {
    "synth": cmd_synth, "normalize": cmd_normalize, "tile": cmd_tile, "train-patch": cmd_train_patch,
    "infer-maps": cmd_infer_maps, "train-fusion": cmd_train_fusion, "predict": cmd_predict,
    "evaluate": cmd_evaluate, "cv": cmd_cv,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        cfg = resolve_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA

    logging.basicConfig(level=logging.INFO if cfg.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_blas_threads()
    try:
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, StainError, OSError, ValueError, KeyError, RuntimeError) as exc:
        if isinstance(exc.__cause__, NumericalError):
            print(f"numerical abort: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
