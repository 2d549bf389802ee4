"""Desk-scale end-to-end run: synth -> train-patch -> train-fusion -> evaluate -> 2-fold cv."""
import argparse
import sys
import time
from pathlib import Path

from patchfusion.cli import main


def step(name, argv):
    t0 = time.perf_counter()
    code = main(argv)
    print(f"[{name}] exit {code} in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    if code:
        sys.exit(code)


def run(args):
    out = Path(args.out)
    data, manifest = out / "data", str(out / "data" / "manifest.csv")
    seed = ["--seed", str(args.seed)]
    step("synth", ["synth", "--out", str(data), "--per-class", str(args.per_class), "--test-fraction", "0.3", *seed])
    step("train-patch", ["train-patch", "--manifest", manifest, "--out", str(out / "patch"),
                         "--epochs", str(args.epochs), *seed])
    step("train-fusion", ["train-fusion", "--manifest", manifest, "--patch-ckpt", str(out / "patch" / "patch.ckpt"),
                          "--out", str(out / "fusion"), *seed])
    step("evaluate", ["evaluate", "--manifest", manifest, "--patch-ckpt", str(out / "patch" / "patch.ckpt"),
                      "--fusion-ckpt", str(out / "fusion" / "fusion.ckpt"), "--out", str(out / "eval")])
    if args.cv_folds:
        step("cv", ["cv", "--manifest", manifest, "--out", str(out / "cv"), "--folds", str(args.cv_folds),
                    "--epochs", str(args.epochs), *seed])


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/pipeline")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--cv-folds", type=int, default=2, help="0 skips cross-validation")
    run(p.parse_args())
