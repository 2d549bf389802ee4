"""Fusion versus vote baselines on images where only some grid cells carry the class signal."""
import argparse
import json
import tempfile
from pathlib import Path

from threadpoolctl import threadpool_limits

from patchfusion.evaluation import evaluate_models
from patchfusion.fusion import FusionSpec
from patchfusion.patchnet import desk_spec
from patchfusion.tiling import SynthSpec, synth_dataset
from patchfusion.train import FusionHyper, PatchHyper, train_fusion_stage, train_patch_stage


def run(args):
    out = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="biased_"))
    rows = []
    for informative in args.informative:
        spec = SynthSpec(per_class=args.per_class, seed=args.seed, informative=informative, test_fraction=1 / 3)
        manifest = synth_dataset(spec, out / f"inf{informative}")
        train_m, test_m = manifest.subset(split="train"), manifest.subset(split="test")
        with threadpool_limits(1):
            hyper = PatchHyper(epochs=args.epochs, normalize_stains=args.normalize)
            pck, _ = train_patch_stage(train_m, desk_spec(), hyper, seed=args.seed)
            fck, _ = train_fusion_stage(pck, train_m, FusionSpec(grid=(3, 4)), FusionHyper(), seed=args.seed)
            m = evaluate_models(pck, fck, test_m).metrics(4)
        rows.append({"informative": informative, **{k: v for k, v in m.items() if k.startswith("acc4")}})
        print(json.dumps(rows[-1]))


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=5)
    p.add_argument("--per-class", type=int, default=15)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--normalize", action="store_true",
                   help="stain-normalize per image (leaks image-level class statistics into background cells)")
    p.add_argument("--informative", type=int, nargs="+", default=[6, 12],
                   help="informative cells out of 12 (12 = unbiased)")
    run(p.parse_args())
