"""Print parameter counts, feature geometry and per-group receptive fields for the model specs."""
import argparse

from patchfusion.patchnet import count_parameters, desk_spec, feature_size, full_spec, receptive_fields


def describe(name, spec):
    print(f"{name}: input {spec.input_size}px, widths {[g.channels for g in spec.groups]}, K={spec.num_classes}")
    print(f"  parameters     {count_parameters(spec):,}")
    side = feature_size(spec)
    print(f"  final features {spec.groups[-1].channels}x{side}x{side}")
    for i, (lo, hi) in enumerate(receptive_fields(spec), 1):
        print(f"  group {i} RF     {lo}x{lo} to {hi}x{hi}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--desk-size", type=int, default=64)
    args = p.parse_args()
    describe("full-size", full_spec())
    describe("desk", desk_spec(args.desk_size))
