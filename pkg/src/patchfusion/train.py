"""Adam, checkpoint I/O and the two-stage training procedure."""
from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .fusion import FusionNet, FusionSpec, ProbabilityMap, assemble_probability_map, build_fusion
from .patchnet import ModelSpec, PatchNet, build_patchnet
from .stain import REFERENCE_PROFILE, StainProfile, normalize_image
from .tensor import Tensor
from .tiling import AugmentPolicy, DatasetManifest, apply_augment, draw_augment, extract_patches, read_image

log = logging.getLogger(__name__)

MAGIC = b"PFNCKPT1"


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              names: Optional[Sequence[str]] = None) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            raise T.NumericalError(f"non-finite gradient for parameter {label}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    """Adam over a list of Tensors; missing grads count as zero."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, [p.name for p in self.params])


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    kind: str                 # "patchnet" or "fusion"
    spec: dict
    weights: dict             # name -> float array; parameters then buffers
    num_params: int = 0
    stats: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def save(self, path) -> None:
        entries = [{"name": k, "shape": list(v.shape)} for k, v in self.weights.items()]
        header = {"kind": self.kind, "spec": self.spec, "stats": self.stats,
                  "metadata": self.metadata, "num_params": self.num_params, "entries": entries}
        raw = json.dumps(header).encode("utf-8")
        blob = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in self.weights.values())
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(blob)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
        if data[:8] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {data[:8]!r})")
        try:
            (n,) = struct.unpack("<Q", data[8:16])
            header = json.loads(data[16:16 + n].decode("utf-8"))
            blob = np.frombuffer(data[16 + n:], dtype="<f4")
            weights, pos = {}, 0
            for e in header["entries"]:
                size = int(np.prod(e["shape"], dtype=np.int64))
                weights[e["name"]] = blob[pos:pos + size].astype(np.float64).reshape(e["shape"])
                pos += size
        except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
        if pos != blob.size:
            raise CheckpointError(f"{path}: blob has {blob.size} floats, header declares {pos}")
        return cls(header["kind"], header["spec"], weights, header.get("num_params", 0),
                   header.get("stats", {}), header.get("metadata", {}))


def patch_checkpoint(model: PatchNet, stats: dict, metadata: dict) -> Checkpoint:
    weights = {k: p.data for k, p in model.params.items()}
    for k, s in model.stats.items():
        weights[k + ".running_mean"] = s.mean
        weights[k + ".running_var"] = s.var
    return Checkpoint("patchnet", model.spec.to_dict(), weights, model.num_parameters(), stats, metadata)


def load_patchnet(ckpt: Checkpoint) -> PatchNet:
    if ckpt.kind != "patchnet":
        raise CheckpointError(f"expected a patchnet checkpoint, got {ckpt.kind!r}")
    model = build_patchnet(ModelSpec.from_dict(ckpt.spec), np.random.default_rng(0))
    for k, p in model.params.items():
        p.data = ckpt.weights[k].copy()
    for k, s in model.stats.items():
        s.mean = ckpt.weights[k + ".running_mean"].copy()
        s.var = ckpt.weights[k + ".running_var"].copy()
    return model


def fusion_checkpoint(model: FusionNet, metadata: dict) -> Checkpoint:
    weights = {k: p.data for k, p in model.params.items()}
    return Checkpoint("fusion", model.spec.to_dict(), weights, model.num_parameters(), {}, metadata)


def load_fusion(ckpt: Checkpoint) -> FusionNet:
    if ckpt.kind != "fusion":
        raise CheckpointError(f"expected a fusion checkpoint, got {ckpt.kind!r}")
    model = build_fusion(FusionSpec.from_dict(ckpt.spec), np.random.default_rng(0))
    for k, p in model.params.items():
        p.data = ckpt.weights[k].copy()
    return model


def write_loss_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "loss", "acc"])
        for r in rows:
            w.writerow([r["epoch"], r["split"], repr(float(r["loss"])), repr(float(r["acc"]))])


# ---------------------------------------------------------------- preprocessing

@dataclass(frozen=True)
class PatchHyper:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 50
    stride: Optional[int] = None       # default: patch_size // 2
    augment: bool = True
    normalize_stains: bool = True


@dataclass(frozen=True)
class FusionHyper:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    copies: int = 8                    # augmented copies per training image (copy 0 is the original)
    augment: bool = True


def prepare_image(image: np.ndarray, normalize: bool = True,
                  reference: StainProfile = REFERENCE_PROFILE) -> np.ndarray:
    return normalize_image(image, reference) if normalize else image


def channel_stats(images: Sequence[np.ndarray]) -> dict:
    """Per-channel mean/std of [0, 1]-scaled pixels."""
    total = np.zeros(3)
    sq = np.zeros(3)
    n = 0
    for img in images:
        f = img.reshape(-1, 3).astype(np.float64) / 255.0
        total += f.sum(axis=0)
        sq += (f * f).sum(axis=0)
        n += f.shape[0]
    mean = total / n
    std = np.sqrt(np.maximum(sq / n - mean * mean, 1e-12))
    return {"mean": mean.tolist(), "std": std.tolist()}


def to_input(patches: Sequence[np.ndarray], stats: dict) -> np.ndarray:
    """uint8 H×W×3 patches -> standardized N×3×H×W float batch."""
    x = np.stack(patches).astype(np.float64) / 255.0
    x = (x - np.asarray(stats["mean"])) / np.asarray(stats["std"])
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def load_prepared(manifest: DatasetManifest, normalize: bool, reference: StainProfile = REFERENCE_PROFILE):
    return [prepare_image(read_image(manifest.resolve(e)), normalize, reference) for e in manifest.entries]


def _reference_from_stats(stats: dict) -> StainProfile:
    ref = stats.get("stain_reference")
    return StainProfile.from_json(ref) if ref else REFERENCE_PROFILE


# ---------------------------------------------------------------- stage 1

def _predict_batches(model: PatchNet, x: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch):
        _, probs = model.forward(Tensor(x[i:i + batch]), "eval")
        out.append(probs.data)
    return np.concatenate(out) if out else np.zeros((0, model.spec.num_classes))


def train_patch_stage(manifest: DatasetManifest, spec: ModelSpec, hyper: PatchHyper = PatchHyper(),
                      seed: int = 0, images: Optional[Sequence[np.ndarray]] = None,
                      reference: StainProfile = REFERENCE_PROFILE):
    """Weakly-labelled patch training. Returns (checkpoint, loss_log_rows)."""
    if len(manifest) == 0:
        raise ValueError("empty training manifest")
    size = spec.input_size
    stride = hyper.stride or max(size // 2, 1)
    if images is None:
        images = load_prepared(manifest, hyper.normalize_stains, reference)
    patches, labels = [], []
    for img, entry in zip(images, manifest.entries):
        grid = extract_patches(img, size, stride)
        patches.extend(grid.patches)
        labels.extend([entry.label] * len(grid))
    labels = np.asarray(labels, dtype=np.int64)
    stats = channel_stats(images)
    stats.update(normalize_stains=hyper.normalize_stains, stain_reference=reference.to_json(),
                 patch_size=size, stride=stride)

    model = build_patchnet(spec, np.random.default_rng([seed, 0]))
    opt = Adam(model.parameters(), lr=hyper.lr)
    rows = []
    policy = AugmentPolicy()
    n = len(patches)
    for epoch in range(1, hyper.epochs + 1):
        order = np.random.default_rng([seed, 1, epoch]).permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            batch = [apply_augment(patches[i], draw_augment(np.random.default_rng([seed, 2, epoch, int(i)]), policy))
                     if hyper.augment else patches[i] for i in idx]
            x = Tensor(to_input(batch, stats))
            opt.zero_grad()
            with T.Tape() as tape:
                logits = model.logits(x, "train")
                loss = T.cross_entropy(logits, labels[idx])
                if not np.isfinite(loss.data):
                    raise T.NumericalError(f"NaN/inf loss at epoch {epoch}, batch starting {start}")
                tape.backward(loss)
            opt.step()
            loss_sum += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
        rows.append({"epoch": epoch, "split": "train", "loss": loss_sum / n, "acc": correct / n})
        log.info("patch epoch %d loss %.4f acc %.3f", epoch, loss_sum / n, correct / n)
        if epoch > 5 and rows[-1]["loss"] > rows[-6]["loss"]:
            log.warning("patch loss rose over the last 5 epochs (%.4f -> %.4f)", rows[-6]["loss"], rows[-1]["loss"])

    meta = {"seed": seed, "epoch": hyper.epochs, "loss_history": [r["loss"] for r in rows],
            "hyper": asdict(hyper)}
    if hyper.epochs:
        probs = _predict_batches(model, to_input(patches, stats))
        acc = float((probs.argmax(axis=1) == labels).mean())
        meta["train_patch_accuracy"] = acc
        rows.append({"epoch": hyper.epochs, "split": "train_eval", "loss": float(
            -np.log(np.maximum(probs[np.arange(n), labels], 1e-300)).mean()), "acc": acc})
    return patch_checkpoint(model, stats, meta), rows


# ---------------------------------------------------------------- stage 2

def infer_probability_map(model: PatchNet, stats: dict, image: np.ndarray) -> ProbabilityMap:
    """Non-overlapping tiling + eval-mode patch inference, assembled in spatial order."""
    size = model.spec.input_size
    grid = extract_patches(image, size, size)
    probs = _predict_batches(model, to_input(grid.patches, stats))
    return assemble_probability_map(list(probs), grid.rows, grid.cols)


def augmented_maps(model: PatchNet, stats: dict, image: np.ndarray, copies: int, rng_key: Sequence[int],
                   augment: bool = True) -> list:
    """Probability maps for an image and its whole-image augmentations (copy 0 = original)."""
    policy = AugmentPolicy(rotation="half")
    maps = []
    for c in range(max(copies, 1)):
        img = image
        if c > 0 and augment:
            img = apply_augment(image, draw_augment(np.random.default_rng([*rng_key, c]), policy))
        maps.append(infer_probability_map(model, stats, img))
    return maps


def fit_fusion(maps: Sequence[ProbabilityMap], labels: Sequence[int], spec: FusionSpec,
               hyper: FusionHyper = FusionHyper(), seed: int = 0):
    """Train the fusion MLP on precomputed maps. Returns (model, loss_log_rows)."""
    for m in maps:
        if m.values.shape != (*spec.grid, spec.num_classes):
            raise ValueError(f"map shape {m.values.shape} inconsistent with fusion grid {spec.grid}"
                             f" and {spec.num_classes} classes")
    x_all = np.stack([m.flatten() for m in maps])
    y_all = np.asarray(labels, dtype=np.int64)
    model = build_fusion(spec, np.random.default_rng([seed, 10]))
    opt = Adam(model.parameters(), lr=hyper.lr)
    n = len(maps)
    rows = []
    for epoch in range(1, hyper.epochs + 1):
        order = np.random.default_rng([seed, 11, epoch]).permutation(n)
        drop_rng = np.random.default_rng([seed, 12, epoch])
        loss_sum, correct = 0.0, 0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            opt.zero_grad()
            with T.Tape() as tape:
                logits = model.logits(Tensor(x_all[idx]), "train", drop_rng)
                loss = T.cross_entropy(logits, y_all[idx])
                tape.backward(loss)
            opt.step()
            loss_sum += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == y_all[idx]).sum())
        rows.append({"epoch": epoch, "split": "train", "loss": loss_sum / n, "acc": correct / n})
        log.info("fusion epoch %d loss %.4f acc %.3f", epoch, loss_sum / n, correct / n)
    return model, rows


def _weight_bytes(model: PatchNet) -> bytes:
    parts = [p.data.tobytes() for p in model.params.values()]
    parts += [s.mean.tobytes() + s.var.tobytes() for s in model.stats.values()]
    return b"".join(parts)


def build_fusion_maps(patch_model: PatchNet, stats: dict, manifest: DatasetManifest, copies: int,
                      seed: int, augment: bool = True, images: Optional[Sequence[np.ndarray]] = None):
    if images is None:
        images = load_prepared(manifest, stats.get("normalize_stains", True), _reference_from_stats(stats))
    maps, labels = [], []
    for i, (img, entry) in enumerate(zip(images, manifest.entries)):
        for m in augmented_maps(patch_model, stats, img, copies, (seed, 3, i), augment):
            maps.append(m)
            labels.append(entry.label)
    return maps, labels


def train_fusion_stage(patch_ckpt: Checkpoint, manifest: DatasetManifest, fusion_spec: FusionSpec,
                       hyper: FusionHyper = FusionHyper(), seed: int = 0,
                       images: Optional[Sequence[np.ndarray]] = None):
    """Frozen patch network -> probability maps -> fusion MLP. Returns (checkpoint, loss_log_rows)."""
    patch_model = load_patchnet(patch_ckpt)
    before = _weight_bytes(patch_model)
    maps, labels = build_fusion_maps(patch_model, patch_ckpt.stats, manifest, hyper.copies, seed,
                                     hyper.augment, images)
    model, rows = fit_fusion(maps, labels, fusion_spec, hyper, seed)
    if _weight_bytes(patch_model) != before:
        raise RuntimeError("patch network weights changed during fusion training")
    meta = {"seed": seed, "epoch": hyper.epochs, "loss_history": [r["loss"] for r in rows],
            "hyper": asdict(hyper), "num_maps": len(maps)}
    return fusion_checkpoint(model, meta), rows
