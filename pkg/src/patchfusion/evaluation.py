"""Metrics, stratified k-fold planning, cross-validation and report rendering."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .fusion import FusionSpec, fuse_mlp, fuse_vote, predict_image
from .patchnet import ModelSpec
from .tiling import DatasetManifest
from .train import (FusionHyper, PatchHyper, infer_probability_map, load_fusion, load_patchnet,
                    load_prepared, train_fusion_stage, train_patch_stage, _reference_from_stats)

log = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # K×K, rows = true, cols = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion_and_accuracy(preds, labels, num_classes: int) -> tuple[ConfusionMatrix, float]:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions for {labels.size} labels")
    for name, v in (("prediction", preds), ("label", labels)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise ValueError(f"{name} outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    cm = ConfusionMatrix(counts)
    return cm, cm.accuracy


def two_class_map(probs_4) -> tuple[float, float]:
    """(p_noncarcinoma, p_carcinoma) from (normal, benign, in situ, invasive) probabilities."""
    p = np.asarray(probs_4, dtype=np.float64)
    if p.shape != (4,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"expected a 4-class probability vector, got {p}")
    return float(p[0] + p[1]), float(p[2] + p[3])


def roc_auc(scores, labels) -> tuple[float, list]:
    """ROC points by sweeping distinct thresholds, and trapezoidal AUC.

    Tied scores enter the curve together, which gives them half credit,
    matching the Mann-Whitney convention.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both positive and negative labels")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]  # final index of each tied group
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0, tp] / n_pos
    fpr = np.r_[0, fp] / n_neg
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return auc, list(zip(fpr.tolist(), tpr.tolist()))


@dataclass
class FoldPlan:
    assignments: np.ndarray  # fold index per manifest entry
    k: int
    seed: int

    def fold(self, f: int) -> np.ndarray:
        return np.nonzero(self.assignments == f)[0]

    def train_indices(self, f: int) -> np.ndarray:
        return np.nonzero(self.assignments != f)[0]

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "assignments": self.assignments.tolist()}


def stratified_kfold(labels, k: int, seed: int = 0) -> FoldPlan:
    """Per-class seeded shuffle, then round-robin fold assignment continuing across classes."""
    if isinstance(labels, DatasetManifest):
        labels = labels.labels
    y = np.asarray(labels, dtype=np.int64)
    if k < 1:
        raise ValueError("k must be >= 1")
    out = np.full(len(y), -1, dtype=np.int64)
    rng = np.random.default_rng([seed, 0xF01D])
    cursor = 0
    for c in np.unique(y):
        members = np.nonzero(y == c)[0]
        if len(members) < k:
            raise ValueError(f"class {c} has {len(members)} members, fewer than k={k}")
        members = rng.permutation(members)
        out[members] = (cursor + np.arange(len(members))) % k
        cursor = (cursor + len(members)) % k
    return FoldPlan(out, k, seed)


def mean_std(values) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    mean = float(v.mean())
    std = float(np.sqrt(((v - mean) ** 2).sum() / (v.size - 1))) if v.size > 1 else float("nan")
    return mean, std


# ---------------------------------------------------------------- evaluation of trained models

@dataclass
class EvalResult:
    labels: np.ndarray
    preds: np.ndarray
    probs: np.ndarray            # N×K fused image probabilities
    vote_preds: dict = field(default_factory=dict)

    def metrics(self, num_classes: int) -> dict:
        cm, acc4 = confusion_and_accuracy(self.preds, self.labels, num_classes)
        out = {"acc4": acc4, "n": int(len(self.labels))}
        if num_classes == 4:
            y2 = (self.labels >= 2).astype(int)
            p_car = self.probs[:, 2] + self.probs[:, 3]
            out["acc2"] = float(((p_car > 1 - p_car).astype(int) == y2).mean())
            out["auc2"] = roc_auc(p_car, y2)[0] if 0 < y2.sum() < len(y2) else float("nan")
        for name, vp in self.vote_preds.items():
            out[f"acc4_vote_{name}"] = float((np.asarray(vp) == self.labels).mean())
        return out


def evaluate_models(patch_ckpt, fusion_ckpt, manifest: DatasetManifest, images=None) -> EvalResult:
    patch_model, fusion_model = load_patchnet(patch_ckpt), load_fusion(fusion_ckpt)
    stats = patch_ckpt.stats
    if images is None:
        images = load_prepared(manifest, stats.get("normalize_stains", True), _reference_from_stats(stats))
    probs, preds = [], []
    votes = {"majority": [], "max_prob": [], "sum_prob": []}
    for img in images:
        pmap = infer_probability_map(patch_model, stats, img)
        p = fuse_mlp(fusion_model, pmap)
        probs.append(p)
        preds.append(predict_image(p))
        for name in votes:
            votes[name].append(fuse_vote(pmap, name))
    k = fusion_model.spec.num_classes
    return EvalResult(manifest.labels, np.asarray(preds, dtype=np.int64),
                      np.asarray(probs).reshape(-1, k), {n: np.asarray(v) for n, v in votes.items()})


@dataclass
class CVReport:
    fold_metrics: list
    summary: dict
    confusion: np.ndarray
    roc_points: list
    auc_pooled: float
    plan: FoldPlan


def run_cv(manifest: DatasetManifest, k: int, patch_spec: ModelSpec, fusion_spec: FusionSpec,
           patch_hyper: PatchHyper = PatchHyper(), fusion_hyper: FusionHyper = FusionHyper(),
           seed: int = 0, out_dir=None) -> CVReport:
    """Train both stages per fold on out-of-fold data, evaluate on the fold."""
    plan = stratified_kfold(manifest.labels, k, seed)
    images = load_prepared(manifest, patch_hyper.normalize_stains)
    fold_metrics = []
    pooled_cm = np.zeros((manifest.num_classes,) * 2, dtype=np.int64)
    all_scores, all_y2 = [], []
    for f in range(k):
        test_idx = plan.fold(f)
        train_idx = plan.train_indices(f) if k > 1 else test_idx
        train_m, test_m = manifest.subset(train_idx), manifest.subset(test_idx)
        try:
            pck, _ = train_patch_stage(train_m, patch_spec, patch_hyper, seed + f,
                                       images=[images[i] for i in train_idx])
            fck, _ = train_fusion_stage(pck, train_m, fusion_spec, fusion_hyper, seed + f,
                                        images=[images[i] for i in train_idx])
            res = evaluate_models(pck, fck, test_m, images=[images[i] for i in test_idx])
        except Exception as exc:
            raise RuntimeError(f"fold {f}: {exc}") from exc
        m = {"fold": f, **res.metrics(manifest.num_classes)}
        fold_metrics.append(m)
        pooled_cm += confusion_and_accuracy(res.preds, res.labels, manifest.num_classes)[0].counts
        if manifest.num_classes == 4:
            all_scores.extend((res.probs[:, 2] + res.probs[:, 3]).tolist())
            all_y2.extend((res.labels >= 2).astype(int).tolist())
        log.info("fold %d: %s", f, m)

    summary = {}
    for key in ("acc4", "acc2", "auc2"):
        vals = [m[key] for m in fold_metrics if key in m]
        if vals:
            summary[key + "_mean"], summary[key + "_std"] = mean_std(vals)
    roc_points, auc = [], float("nan")
    if all_y2 and 0 < sum(all_y2) < len(all_y2):
        auc, roc_points = roc_auc(all_scores, all_y2)
    report = CVReport(fold_metrics, summary, pooled_cm, roc_points, auc, plan)
    if out_dir is not None:
        write_report(report, out_dir, manifest.class_names)
    return report


# ---------------------------------------------------------------- report files

def write_report(report: CVReport, out_dir, class_names: Sequence[str]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = ["fold", "n", "acc4", "acc2", "auc2"]
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for m in report.fold_metrics:
            w.writerow([m.get(key, "") for key in keys])
        for stat in ("mean", "std"):
            w.writerow([stat, ""] + [report.summary.get(f"{key}_{stat}", "") for key in keys[2:]])
    with open(out / "confusion.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *class_names])
        for name, row in zip(class_names, report.confusion):
            w.writerow([name, *row.tolist()])
    (out / "confusion.svg").write_text(confusion_svg(report.confusion, class_names))
    with open(out / "roc.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr"])
        for fpr, tpr in report.roc_points:
            w.writerow([repr(fpr), repr(tpr)])
    (out / "roc.svg").write_text(roc_svg(report.roc_points, report.auc_pooled))
    (out / "folds.json").write_text(json.dumps(
        {**report.plan.to_dict(), "fold_metrics": report.fold_metrics, "summary": report.summary,
         "pooled_auc2": report.auc_pooled}, indent=2) + "\n")


def confusion_svg(counts: np.ndarray, class_names: Sequence[str], cell: int = 60) -> str:
    k = len(class_names)
    left, top = 90, 40
    width, height = left + k * cell + 20, top + k * cell + 60
    peak = max(int(counts.max()), 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="12">',
             f'<text x="{left}" y="20">Confusion matrix (rows: true, cols: predicted)</text>']
    for i in range(k):
        parts.append(f'<text x="{left - 6}" y="{top + i * cell + cell // 2 + 4}" text-anchor="end">'
                     f'{class_names[i]}</text>')
        parts.append(f'<text x="{left + i * cell + cell // 2}" y="{top + k * cell + 16}" '
                     f'text-anchor="middle">{class_names[i]}</text>')
        for j in range(k):
            v = int(counts[i, j])
            shade = int(255 - 200 * v / peak)
            parts.append(f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                         f'fill="rgb({shade},{shade},255)" stroke="#333"/>')
            parts.append(f'<text x="{left + j * cell + cell // 2}" y="{top + i * cell + cell // 2 + 4}" '
                         f'text-anchor="middle">{v}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def roc_svg(points: Sequence, auc: float, size: int = 300) -> str:
    pad = 40
    def xy(fpr, tpr):
        return pad + fpr * size, pad + (1 - tpr) * size
    path = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(f, t) for f, t in points))
    w = h = size + 2 * pad
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">',
        f'<rect x="{pad}" y="{pad}" width="{size}" height="{size}" fill="none" stroke="#333"/>',
        f'<line x1="{pad}" y1="{pad + size}" x2="{pad + size}" y2="{pad}" stroke="#aaa" stroke-dasharray="4"/>',
        f'<polyline points="{path}" fill="none" stroke="#c00" stroke-width="2"/>',
        f'<text x="{pad}" y="{pad - 10}">ROC, carcinoma vs non-carcinoma (AUC = {auc:.4f})</text>',
        f'<text x="{pad + size / 2}" y="{h - 8}" text-anchor="middle">false positive rate</text>',
        f'<text x="12" y="{pad + size / 2}" transform="rotate(-90 12 {pad + size / 2})" '
        f'text-anchor="middle">true positive rate</text>',
        "</svg>",
    ]) + "\n"
