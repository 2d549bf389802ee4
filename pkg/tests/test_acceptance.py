"""Acceptance criteria A1-A9. Each test records one PASS/FAIL line for the terminal summary."""
import csv
import time
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import record
from oracles import (argmax_oracle, auc_oracle, confusion_oracle, mixture_concentrations, mixture_image,
                     unit, vote_oracle)
from patchfusion import tensor as T
from patchfusion.cli import main
from patchfusion.evaluation import confusion_and_accuracy, evaluate_models, roc_auc, stratified_kfold
from patchfusion.fusion import FusionSpec, ProbabilityMap, fuse_vote, predict_image
from patchfusion.gradcheck import analytic_gradients, max_relative_error, numerical_gradient
from patchfusion.patchnet import desk_spec, full_spec, receptive_fields
from patchfusion.stain import REFERENCE_PROFILE, angular_error_deg, image_profile, normalize_stains
from patchfusion.tensor import RunningStats, Tensor
from patchfusion.tiling import SynthSpec, extract_patches, reassemble, synth_dataset
from patchfusion.train import FusionHyper, PatchHyper, train_fusion_stage, train_patch_stage

POINTS = 20
H = 1e-5


# ---------------------------------------------------------------- A1

def _param(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _projected(fn, shape, rng):
    r = Tensor(rng.standard_normal(shape))
    return lambda: T.sum_all(T.mul(fn(), r))


def _micro_net(rng):
    """Identity block (2->2) then projection block (2->4, stride 2), pool, linear, cross-entropy."""
    p = {
        "b1.c1": rng.standard_normal((2, 2, 3, 3)) * 0.5, "b1.c2": rng.standard_normal((2, 2, 3, 3)) * 0.5,
        "b2.c1": rng.standard_normal((4, 2, 3, 3)) * 0.5, "b2.c2": rng.standard_normal((4, 4, 3, 3)) * 0.3,
        "b2.proj": rng.standard_normal((4, 2, 1, 1)),
        "fc.w": rng.standard_normal((4, 4)), "fc.b": rng.standard_normal(4),
    }
    for name, c in (("b1.n1", 2), ("b1.n2", 2), ("b2.n1", 4), ("b2.n2", 4), ("b2.np", 4)):
        p[name + ".g"] = rng.uniform(0.5, 1.5, c)
        p[name + ".b"] = rng.normal(0, 0.3, c)
    params = {k: _param(v) for k, v in p.items()}
    x = _param(rng.standard_normal((2, 2, 8, 8)))
    y = [1, 3]

    def bn(h, name):
        return T.batchnorm2d(h, params[name + ".g"], params[name + ".b"], RunningStats(h.shape[1]), "train")

    def loss():
        h = T.relu(bn(T.conv2d(x, params["b1.c1"], padding=1), "b1.n1"))
        h = bn(T.conv2d(h, params["b1.c2"], padding=1), "b1.n2")
        h1 = T.relu(T.add(h, x))
        h = T.relu(bn(T.conv2d(h1, params["b2.c1"], stride=2, padding=1), "b2.n1"))
        h = bn(T.conv2d(h, params["b2.c2"], padding=1), "b2.n2")
        sc = bn(T.conv2d(h1, params["b2.proj"], stride=2), "b2.np")
        h2 = T.relu(T.add(h, sc))
        return T.cross_entropy(T.linear(T.global_avgpool(h2), params["fc.w"], params["fc.b"]), y)

    return loss, [x, *params.values()]


def _cases():
    """name -> (builder(rng) -> (loss_fn, params), smooth?)."""
    def unary(op, shape=(2, 3, 4, 4), scale=1.0):
        def build(rng):
            x = _param(rng.standard_normal(shape) * scale)
            return _projected(lambda: op(x), op(x).shape, rng), [x]
        return build

    def binary(op):
        def build(rng):
            a, b = _param(rng.standard_normal((3, 4))), _param(rng.standard_normal((3, 4)))
            return _projected(lambda: op(a, b), (3, 4), rng), [a, b]
        return build

    def conv(rng):
        x, w, b = _param(rng.standard_normal((2, 3, 6, 6))), _param(rng.standard_normal((4, 3, 3, 3))), \
            _param(rng.standard_normal(4))
        fn = lambda: T.conv2d(x, w, b, stride=2, padding=1)  # noqa: E731
        return _projected(fn, fn().shape, rng), [x, w, b]

    def linear(rng):
        x, w, b = _param(rng.standard_normal((3, 5))), _param(rng.standard_normal((5, 4))), \
            _param(rng.standard_normal(4))
        return _projected(lambda: T.linear(x, w, b), (3, 4), rng), [x, w, b]

    def bn(mode):
        def build(rng):
            x = _param(rng.standard_normal((3, 2, 4, 4)) * 2 + 1)
            g, b = _param(rng.uniform(0.5, 1.5, 2)), _param(rng.normal(0, 1, 2))
            mean, var = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)

            def fn():
                s = RunningStats(2)
                s.mean, s.var = mean.copy(), var.copy()
                return T.batchnorm2d(x, g, b, s, mode)
            return _projected(fn, x.shape, rng), [x, g, b]
        return build

    def xent(rng):
        z = _param(rng.standard_normal((5, 4)) * 2)
        y = rng.integers(0, 4, 5)
        return (lambda: T.cross_entropy(z, y)), [z]

    def dropout(rng):
        x = _param(rng.standard_normal((4, 6)))
        seed = int(rng.integers(1 << 31))
        # a fixed stream gives a fixed mask, so the op is linear in x
        return _projected(lambda: T.dropout(x, 0.3, np.random.default_rng(seed), "train"), (4, 6), rng), [x]

    return {
        "add": (binary(T.add), True), "sub": (binary(T.sub), True), "mul": (binary(T.mul), True),
        "sum_all": (unary(lambda x: T.reshape(T.sum_all(x), (1,))), True),
        "mean_all": (unary(lambda x: T.reshape(T.mean_all(x), (1,))), True),
        "reshape": (unary(lambda x: T.reshape(x, (6, 16))), True),
        "flatten": (unary(T.flatten), True),
        "conv2d": (conv, True), "linear": (linear, True),
        "avgpool2d": (unary(lambda x: T.avgpool2d(x, 2, 2)), True),
        "global_avgpool": (unary(T.global_avgpool), True),
        "batchnorm_train": (bn("train"), True), "batchnorm_eval": (bn("eval"), True),
        "softmax": (unary(T.softmax, (4, 5), 2.0), True),
        "cross_entropy": (xent, True), "dropout": (dropout, True),
        "relu": (unary(T.relu), False),
        "maxpool2d": (unary(lambda x: T.maxpool2d(x, 3, 2, padding=1)), False),
        "micro_net": (_micro_net, False),
    }


def _check_point(loss_fn, params, max_coords, rng):
    grads, margin = analytic_gradients(loss_fn, params)
    worst = 0.0
    for p, g in zip(params, grads):
        coords = None
        if max_coords and p.data.size > max_coords:
            flat = rng.choice(p.data.size, max_coords, replace=False)
            coords = [np.unravel_index(i, p.shape) for i in flat]
        num = numerical_gradient(loss_fn, p.data, H, coords)
        mask = ~np.isnan(num)
        worst = max(worst, max_relative_error(g[mask], num[mask]))
    return worst, margin


def test_a1_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    failures, rejected, report = [], 0, {}
    for name, (build, smooth) in _cases().items():
        tol = 1e-6 if smooth else 1e-4
        worst, accepted = 0.0, 0
        while accepted < POINTS:
            loss_fn, params = build(rng)
            err, margin = _check_point(loss_fn, params, 12 if name == "micro_net" else None, rng)
            if not smooth and margin < 100 * H:
                rejected += 1  # finite differences would straddle a kink
                continue
            accepted += 1
            worst = max(worst, err)
        report[name] = worst
        if worst >= tol:
            failures.append(f"{name}={worst:.2e}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60
    worst_name = max(report, key=report.get)
    record("A1", ok, f"{len(report)} ops x {POINTS} points, worst {worst_name}={report[worst_name]:.2e}, "
                     f"{rejected} kink points rejected, {elapsed:.1f}s" + (f"; failed {failures}" if failures else ""))
    assert not failures
    assert elapsed < 60


# ---------------------------------------------------------------- A2

def test_a2_receptive_fields():
    t0 = time.perf_counter()
    got = receptive_fields(full_spec())
    want = [(19, 43), (51, 99), (115, 211), (243, 435)]
    elapsed = time.perf_counter() - t0
    record("A2", got == want and elapsed < 1, f"receptive fields {got}, {elapsed * 1e3:.2f} ms")
    assert got == want


# ---------------------------------------------------------------- A3

@pytest.mark.slow
def test_a3_overfit_capacity(tmp_path):
    t0 = time.perf_counter()
    manifest = synth_dataset(SynthSpec(per_class=10, seed=1), tmp_path / "data")
    with threadpool_limits(1):
        ckpt, rows = train_patch_stage(manifest, desk_spec(), PatchHyper(epochs=20), seed=1)
    acc = ckpt.metadata["train_patch_accuracy"]
    elapsed = time.perf_counter() - t0
    ok = acc >= 0.95 and elapsed < 15 * 60
    record("A3", ok, f"train patch accuracy {acc:.4f} after 20 epochs on {len(manifest)} images, {elapsed:.0f}s")
    assert acc >= 0.95
    assert elapsed < 15 * 60


# ---------------------------------------------------------------- A4

@pytest.mark.slow
def test_a4_fusion_beats_majority_vote(tmp_path):
    t0 = time.perf_counter()
    spec = SynthSpec(per_class=15, seed=5, informative=6, test_fraction=1 / 3)
    manifest = synth_dataset(spec, tmp_path / "biased")
    train_m, test_m = manifest.subset(split="train"), manifest.subset(split="test")
    with threadpool_limits(1):
        # per-image stain normalization would leak each image's class statistics into its
        # background cells, so this set is used as rendered
        pck, _ = train_patch_stage(train_m, desk_spec(), PatchHyper(epochs=10, normalize_stains=False), seed=5)
        fck, _ = train_fusion_stage(pck, train_m, FusionSpec(grid=(3, 4)), FusionHyper(), seed=5)
        res = evaluate_models(pck, fck, test_m)
    m = res.metrics(4)
    gap = 100 * (m["acc4"] - m["acc4_vote_majority"])
    elapsed = time.perf_counter() - t0
    ok = gap >= 5 and elapsed < 20 * 60
    record("A4", ok, f"held-out n={m['n']}: fusion MLP {m['acc4']:.3f} vs majority {m['acc4_vote_majority']:.3f} "
                     f"(+{gap:.1f} pts; max {m['acc4_vote_max_prob']:.3f}, sum {m['acc4_vote_sum_prob']:.3f}), "
                     f"{elapsed:.0f}s")
    assert gap >= 5
    assert elapsed < 20 * 60


# ---------------------------------------------------------------- A5

def _fold_oracle_ok(labels, plan, k):
    for c in np.unique(labels):
        n = int((labels == c).sum())
        counts = [int((labels[plan.fold(f)] == c).sum()) for f in range(k)]
        if sum(counts) != n or min(counts) < n // k or max(counts) > -(-n // k):
            return False
    return sorted(np.concatenate([plan.fold(f) for f in range(k)]).tolist()) == list(range(len(labels)))


def test_a5_oracle_equivalence():
    t0 = time.perf_counter()
    n_inst = 10_000
    rng = np.random.default_rng(55)
    mismatches = {k: 0 for k in ("vote", "argmax", "confusion", "accuracy", "folds", "auc")}
    worst_auc = 0.0
    for i in range(n_inst):
        ties = i % 3 == 0
        v = rng.dirichlet(np.ones(4), size=(3, 4))
        if ties:
            v = np.round(v * 4)
            v[v.sum(axis=2) == 0] = 1.0
            v = v / v.sum(axis=2, keepdims=True)
        pm = ProbabilityMap(v)
        for s in ("majority", "max_prob", "sum_prob"):
            mismatches["vote"] += fuse_vote(pm, s) != vote_oracle(v, s)
        p = v[0, 0]
        mismatches["argmax"] += predict_image(p) != argmax_oracle(p)

        n = int(rng.integers(1, 40))
        preds, labels = rng.integers(0, 4, n), rng.integers(0, 4, n)
        cm, acc = confusion_and_accuracy(preds, labels, 4)
        mismatches["confusion"] += not np.array_equal(cm.counts, confusion_oracle(preds, labels, 4))
        brute_acc = sum(int(a == b) for a, b in zip(preds, labels)) / n
        mismatches["accuracy"] += abs(acc - brute_acc) > 1e-12

        k = int(rng.integers(1, 6))
        sizes = rng.integers(k, k + 8, int(rng.integers(1, 5)))
        y = rng.permutation(np.repeat(np.arange(len(sizes)), sizes))
        mismatches["folds"] += not _fold_oracle_ok(y, stratified_kfold(y, k, int(rng.integers(1000))), k)

        m = int(rng.integers(2, 30))
        y2 = rng.integers(0, 2, m)
        y2[0], y2[1] = 0, 1
        scores = rng.integers(0, 6, m) / 5.0 if ties else rng.random(m)
        err = abs(roc_auc(scores, y2)[0] - auc_oracle(scores, y2))
        worst_auc = max(worst_auc, err)
        mismatches["auc"] += err > 1e-12
    elapsed = time.perf_counter() - t0
    ok = not any(mismatches.values()) and elapsed < 60
    record("A5", ok, f"{n_inst} instances per oracle, mismatches {mismatches}, max AUC error {worst_auc:.1e}, "
                     f"{elapsed:.1f}s")
    assert not any(mismatches.values())
    assert elapsed < 60


# ---------------------------------------------------------------- A6

def test_a6_geometry():
    img = np.random.default_rng(6).integers(0, 256, (1536, 2048, 3), dtype=np.uint8)
    grid = extract_patches(img, 512, 512)
    exact = np.array_equal(reassemble(grid), img)
    ok = (grid.rows, grid.cols, len(grid)) == (3, 4, 12) and exact
    record("A6", ok, f"2048x1536 -> {grid.rows}x{grid.cols} grid, {len(grid)} patches, reassembly exact={exact}")
    assert ok


# ---------------------------------------------------------------- A7

def test_a7_stain_normalization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_angle, worst_level = 0.0, 0
    for trial in range(6):
        if trial == 0:
            m = REFERENCE_PROFILE.stain_matrix
        else:
            m = np.column_stack([unit(np.abs(REFERENCE_PROFILE.stain_matrix[:, s] + rng.normal(0, 0.08, 3)))
                                 for s in range(2)])
        img = mixture_image(m, mixture_concentrations(rng))
        prof = image_profile(img)
        for s in range(2):
            worst_angle = max(worst_angle, angular_error_deg(prof.stain_matrix[:, s], m[:, s]))
        out = normalize_stains(img, prof, prof)
        worst_level = max(worst_level, int(np.abs(out.astype(int) - img.astype(int)).max()))
    elapsed = time.perf_counter() - t0
    ok = worst_angle < 2.0 and worst_level <= 2 and elapsed < 30
    record("A7", ok, f"max angular error {worst_angle:.3f} deg, idempotence max change {worst_level} levels, "
                     f"{elapsed:.1f}s")
    assert worst_angle < 2.0
    assert worst_level <= 2
    assert elapsed < 30


# ---------------------------------------------------------------- A8

def test_a8_cli_training_determinism(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--per-class", "2", "--height", "128", "--width", "128",
                 "--seed", "8"]) == 0
    manifest = str(data / "manifest.csv")
    for run in ("a", "b"):
        assert main(["train-patch", "--manifest", manifest, "--out", str(tmp_path / run), "--epochs", "2",
                     "--seed", "8", "--threads", "1"]) == 0
        assert main(["train-fusion", "--manifest", manifest, "--patch-ckpt", str(tmp_path / run / "patch.ckpt"),
                     "--out", str(tmp_path / run), "--epochs", "3", "--copies", "2", "--seed", "8",
                     "--threads", "1"]) == 0
    files = ["patch.ckpt", "patch_loss.csv", "fusion.ckpt", "fusion_loss.csv"]
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files}
    record("A8", all(same.values()), f"train-patch + train-fusion twice, bitwise identical: {same}")
    assert all(same.values())


# ---------------------------------------------------------------- A9

@pytest.mark.slow
def test_a9_end_to_end_cv(tmp_path):
    t0 = time.perf_counter()
    data, report = tmp_path / "data", tmp_path / "report"
    assert main(["synth", "--out", str(data), "--seed", "11"]) == 0
    code = main(["cv", "--manifest", str(data / "manifest.csv"), "--out", str(report), "--folds", "2",
                 "--seed", "3", "--threads", "1"])
    elapsed = time.perf_counter() - t0
    assert code == 0
    with open(report / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["fold"] for r in rows] == ["0", "1", "mean", "std"]
    folds = rows[:2]
    assert all(0 <= float(r[k]) <= 1 for r in folds for k in ("acc4", "acc2", "auc2"))
    mean_acc = float(rows[2]["acc4"])
    assert abs(mean_acc - np.mean([float(r["acc4"]) for r in folds])) < 1e-12
    svg = ET.parse(report / "confusion.svg").getroot()
    assert svg.tag.endswith("svg") and len(svg.findall("{http://www.w3.org/2000/svg}rect")) == 16
    with open(report / "roc.csv", newline="") as fh:
        roc = [(float(r["fpr"]), float(r["tpr"])) for r in csv.DictReader(fh)]
    assert roc[0] == (0.0, 0.0) and roc[-1] == (1.0, 1.0)
    assert all(b[0] >= a[0] and b[1] >= a[1] for a, b in zip(roc, roc[1:]))
    ok = mean_acc >= 0.85 and elapsed < 40 * 60
    record("A9", ok, f"2-fold CV mean acc4 {mean_acc:.3f} (folds {[r['acc4'] for r in folds]}), "
                     f"files well-formed, {elapsed:.0f}s")
    assert mean_acc >= 0.85
    assert elapsed < 40 * 60
