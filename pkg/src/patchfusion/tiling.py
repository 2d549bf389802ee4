"""Patch grids, augmentation, manifests and the synthetic histology generator."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .stain import REFERENCE_PROFILE, od_to_rgb

CLASS_NAMES = ("normal", "benign", "in_situ", "invasive")


# ---------------------------------------------------------------- patch grids

@dataclass
class PatchGrid:
    patches: list
    rows: int
    cols: int
    offsets: list  # (x, y) of each patch's top-left corner, row-major
    patch_size: int
    stride: int

    def __len__(self) -> int:
        return len(self.patches)


def grid_dims(height: int, width: int, patch_size: int, stride: int) -> tuple[int, int]:
    if patch_size > height or patch_size > width:
        raise ValueError(f"patch size {patch_size} larger than image {height}×{width}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return (height - patch_size) // stride + 1, (width - patch_size) // stride + 1


def extract_patches(image: np.ndarray, patch_size: int, stride: int) -> PatchGrid:
    """Cut patches at offsets 0, stride, 2·stride, … while the window fits."""
    h, w = image.shape[:2]
    rows, cols = grid_dims(h, w, patch_size, stride)
    offsets = [(j * stride, i * stride) for i in range(rows) for j in range(cols)]
    patches = [image[y:y + patch_size, x:x + patch_size].copy() for x, y in offsets]
    return PatchGrid(patches, rows, cols, offsets, patch_size, stride)


def reassemble(grid: PatchGrid) -> np.ndarray:
    """Inverse of non-overlapping extraction (covers the tiled region only)."""
    p = grid.patch_size
    if grid.stride != p:
        raise ValueError("reassembly needs a non-overlapping grid (stride == patch_size)")
    first = grid.patches[0]
    out = np.zeros((grid.rows * p, grid.cols * p) + first.shape[2:], dtype=first.dtype)
    for patch, (x, y) in zip(grid.patches, grid.offsets):
        out[y:y + p, x:x + p] = patch
    return out


def center_crop_to_grid(image: np.ndarray, patch_size: int) -> np.ndarray:
    h, w = image.shape[:2]
    th, tw = (h // patch_size) * patch_size, (w // patch_size) * patch_size
    if th == 0 or tw == 0:
        raise ValueError(f"image {h}×{w} is smaller than one {patch_size}px patch")
    y0, x0 = (h - th) // 2, (w - tw) // 2
    return image[y0:y0 + th, x0:x0 + tw]


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentPolicy:
    rotation: str = "quarter"        # "quarter": k·90°, "half": 0/180°, "none"
    hflip: bool = True
    contrast: tuple = (0.9, 1.1)
    brightness: tuple = (-10.0, 10.0)


@dataclass(frozen=True)
class AugmentDraw:
    quarter_turns: int = 0
    flip: bool = False
    contrast: float = 1.0
    brightness: float = 0.0


def draw_augment(rng: np.random.Generator, policy: AugmentPolicy = AugmentPolicy()) -> AugmentDraw:
    # fixed draw order keeps the sequence reproducible for a given stream
    turns = int(rng.integers(4))
    flip = bool(rng.random() < 0.5)
    scale = float(rng.uniform(*policy.contrast))
    offset = float(rng.uniform(*policy.brightness))
    if policy.rotation == "half":
        turns = 2 * (turns % 2)
    elif policy.rotation == "none":
        turns = 0
    return AugmentDraw(turns, flip and policy.hflip, scale, offset)


def apply_augment(patch: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    out = patch
    if draw.quarter_turns % 2 and patch.shape[0] != patch.shape[1]:
        raise ValueError(f"90° rotation needs a square patch, got {patch.shape[:2]}")
    if draw.quarter_turns:
        out = np.rot90(out, draw.quarter_turns, axes=(0, 1))
    if draw.flip:
        out = out[:, ::-1]
    if draw.contrast != 1.0 or draw.brightness != 0.0:
        f = out.astype(np.float64)
        mean = f.mean()
        f = (f - mean) * draw.contrast + mean + draw.brightness
        out = np.clip(np.rint(f), 0, 255)
    return np.ascontiguousarray(out).astype(patch.dtype)


def augment(patch: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy = AugmentPolicy()) -> np.ndarray:
    """Random right-angle rotation, horizontal flip, contrast and brightness jitter."""
    if policy.rotation == "quarter" and patch.shape[0] != patch.shape[1]:
        raise ValueError(f"90° rotation policy needs a square patch, got {patch.shape[:2]}")
    return apply_augment(patch, draw_augment(rng, policy))


# ---------------------------------------------------------------- manifests and image I/O

@dataclass
class ManifestEntry:
    path: str
    label: int
    split: str = "train"


@dataclass
class DatasetManifest:
    entries: list
    class_names: tuple = CLASS_NAMES
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        k = len(self.class_names)
        seen = set()
        for e in self.entries:
            if not 0 <= e.label < k:
                raise ValueError(f"label {e.label} of {e.path} outside [0, {k})")
            if e.path in seen:
                raise ValueError(f"duplicate manifest path {e.path}")
            seen.add(e.path)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def subset(self, indices=None, split: Optional[str] = None) -> "DatasetManifest":
        chosen = self.entries if indices is None else [self.entries[i] for i in indices]
        if split is not None:
            chosen = [e for e in chosen if e.split == split]
        return DatasetManifest(list(chosen), self.class_names, self.root)

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "label", "split"])
            for e in self.entries:
                w.writerow([e.path, e.label, e.split])
        (path.parent / (path.stem + ".classes.txt")).write_text("\n".join(self.class_names) + "\n")

    @classmethod
    def load(cls, path, num_classes: Optional[int] = None) -> "DatasetManifest":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or reader.fieldnames[:3] != ["path", "label", "split"]:
                raise ValueError(f"{path}: manifest header must be path,label,split")
            entries = [ManifestEntry(r["path"], int(r["label"]), r["split"]) for r in reader]
        names_file = path.parent / (path.stem + ".classes.txt")
        if names_file.exists():
            names = tuple(n for n in names_file.read_text().splitlines() if n)
        else:
            k = num_classes or (max(e.label for e in entries) + 1 if entries else 4)
            names = CLASS_NAMES if k == 4 else tuple(f"class_{i}" for i in range(k))
        return cls(entries, names, path.parent)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 4
    per_class: int = 10
    height: int = 192
    width: int = 256
    patch_size: int = 64
    seed: int = 0
    # when set, only this many grid cells per image carry the class texture;
    # the rest are rendered as `background_class` tissue
    informative: Optional[int] = None
    background_class: int = 0
    test_fraction: float = 0.0
    stain_jitter: float = 0.03


def _class_params(label: int) -> tuple[float, float, float]:
    """(orientation rad, spatial frequency cycles/px, blobs per 64×64 area)."""
    theta = (label % 4) * np.pi / 4 + (label // 4) * np.pi / 8
    freq = (0.09, 0.13, 0.17, 0.21)[label % 4]
    density = (2.0, 6.0, 12.0, 20.0)[label % 4]
    return theta, freq, density


def oriented_texture(shape, theta: float, freq: float, rng: np.random.Generator,
                     bandwidth: float = 0.025) -> np.ndarray:
    """Band-limited noise concentrated around spatial frequency `freq` along `theta`, in [0, 1]."""
    h, w = shape
    spec = np.fft.fft2(rng.standard_normal(shape))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    cx, cy = freq * np.cos(theta), freq * np.sin(theta)
    bump = (np.exp(-((fx - cx) ** 2 + (fy - cy) ** 2) / (2 * bandwidth ** 2))
            + np.exp(-((fx + cx) ** 2 + (fy + cy) ** 2) / (2 * bandwidth ** 2)))
    tex = np.real(np.fft.ifft2(spec * bump))
    tex = (tex - tex.mean()) / (tex.std() + 1e-12)
    return np.clip(0.5 + 0.25 * tex, 0.0, 1.0)


def blob_field(shape, density: float, rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    n = rng.poisson(density * h * w / (64 * 64))
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.zeros(shape)
    for _ in range(n):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(3.0, 5.0)
        out += 0.6 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    return out


def _jittered_stains(rng: np.random.Generator, jitter: float) -> np.ndarray:
    m = REFERENCE_PROFILE.stain_matrix + rng.normal(0.0, jitter, (3, 2))
    m = np.abs(m)
    return m / np.linalg.norm(m, axis=0)


def _tissue_fields(shape, label: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    theta, freq, density = _class_params(label)
    t = oriented_texture(shape, theta, freq, rng)
    c_h = 0.15 + 0.55 * t
    c_e = np.minimum(0.1 + 0.15 * (1.0 - t) + blob_field(shape, density, rng), 0.9)
    return c_h, c_e


def synth_image(label: int, spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Render one H&E-like image; returns (rgb uint8, informative-cell mask M×N)."""
    shape = (spec.height, spec.width)
    c_h, c_e = _tissue_fields(shape, label, rng)
    rows, cols = spec.height // spec.patch_size, spec.width // spec.patch_size
    mask = np.ones((rows, cols), dtype=bool)
    if spec.informative is not None and spec.informative < rows * cols:
        bg_h, bg_e = _tissue_fields(shape, spec.background_class, rng)
        mask[:] = False
        keep = rng.choice(rows * cols, size=spec.informative, replace=False)
        mask.reshape(-1)[keep] = True
        p = spec.patch_size
        for i in range(rows):
            for j in range(cols):
                if not mask[i, j]:
                    sl = (slice(i * p, (i + 1) * p), slice(j * p, (j + 1) * p))
                    c_h[sl], c_e[sl] = bg_h[sl], bg_e[sl]
    stains = _jittered_stains(rng, spec.stain_jitter)
    od = c_h[..., None] * stains[:, 0] + c_e[..., None] * stains[:, 1]
    od = od + rng.normal(0.0, 0.01, od.shape)
    rgb = np.clip(np.rint(od_to_rgb(np.maximum(od, 0.0))), 0, 255).astype(np.uint8)
    return rgb, mask


def synth_dataset(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write a class-balanced synthetic PNG set plus `manifest.csv` into out_dir."""
    if spec.height % spec.patch_size or spec.width % spec.patch_size:
        raise ValueError(f"image {spec.height}×{spec.width} not divisible by patch size {spec.patch_size}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    n_test = int(round(spec.test_fraction * spec.per_class))
    entries = []
    for label in range(spec.num_classes):
        for k in range(spec.per_class):
            index = label * spec.per_class + k
            rng = np.random.default_rng([spec.seed, index])
            rgb, _ = synth_image(label, spec, rng)
            rel = f"images/img_{index:04d}_c{label}.png"
            write_image(out_dir / rel, rgb)
            split = "test" if k >= spec.per_class - n_test else "train"
            entries.append(ManifestEntry(rel, label, split))
    names = CLASS_NAMES if spec.num_classes == 4 else tuple(f"class_{i}" for i in range(spec.num_classes))
    manifest = DatasetManifest(entries, names, out_dir)
    manifest.save(out_dir / "manifest.csv")
    return manifest
