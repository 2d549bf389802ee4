"""Spatial probability maps, the fusion MLP and vote-based baselines."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

VOTE_STRATEGIES = ("majority", "max_prob", "sum_prob")
VOTE_ALIASES = {"majority": "majority", "max": "max_prob", "sum": "sum_prob",
                "max_prob": "max_prob", "sum_prob": "sum_prob"}


def _check_fiber(p: np.ndarray, tol: float, what: str) -> None:
    if np.any(p < 0) or abs(p.sum() - 1.0) > tol:
        raise ValueError(f"{what} is not a probability vector: {p}")


@dataclass
class ProbabilityMap:
    """M×N×K grid of per-patch class probabilities in spatial (row-major) order."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"probability map must be M×N×K, got shape {self.values.shape}")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def num_classes(self) -> int:
        return self.values.shape[2]

    def flatten(self) -> np.ndarray:
        return self.values.reshape(-1)

    def fibers(self) -> np.ndarray:
        return self.values.reshape(-1, self.num_classes)

    def validate(self, tol: float = 1e-9) -> None:
        for i in range(self.rows):
            for j in range(self.cols):
                _check_fiber(self.values[i, j], tol, f"fiber ({i}, {j})")

    def to_csv(self, path) -> None:
        k = self.num_classes
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j"] + [f"p_{c}" for c in range(k)])
            for i in range(self.rows):
                for j in range(self.cols):
                    w.writerow([i, j] + [repr(float(v)) for v in self.values[i, j]])

    @classmethod
    def from_csv(cls, path) -> "ProbabilityMap":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: empty probability map")
        k = sum(1 for key in rows[0] if key.startswith("p_"))
        m = max(int(r["i"]) for r in rows) + 1
        n = max(int(r["j"]) for r in rows) + 1
        if len(rows) != m * n:
            raise ValueError(f"{path}: {len(rows)} rows do not form a {m}×{n} grid")
        values = np.full((m, n, k), np.nan)
        for r in rows:
            values[int(r["i"]), int(r["j"])] = [float(r[f"p_{c}"]) for c in range(k)]
        if np.isnan(values).any():
            raise ValueError(f"{path}: missing grid cells")
        return cls(values)


def assemble_probability_map(patch_probs: Sequence, rows: int, cols: int) -> ProbabilityMap:
    """Place patch probability vectors on the grid: values[i, j] = patch_probs[i*cols + j]."""
    probs = [np.asarray(p, dtype=np.float64).reshape(-1) for p in patch_probs]
    if len(probs) != rows * cols:
        raise ValueError(f"expected {rows}×{cols}={rows * cols} patch vectors, got {len(probs)}")
    for idx, p in enumerate(probs):
        _check_fiber(p, 1e-6, f"patch {idx}")
    return ProbabilityMap(np.stack(probs).reshape(rows, cols, -1))


@dataclass(frozen=True)
class FusionSpec:
    grid: tuple = (3, 4)
    num_classes: int = 4
    hidden_sizes: tuple = (128, 64, 32)
    dropout_p: float = 0.5

    def validate(self) -> None:
        if len(self.hidden_sizes) != 3:
            raise ValueError("fusion MLP has exactly 3 hidden layers (4 fully-connected layers)")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ValueError(f"bad grid {self.grid}")

    @property
    def input_size(self) -> int:
        return self.grid[0] * self.grid[1] * self.num_classes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FusionSpec":
        return cls(grid=tuple(d["grid"]), num_classes=d["num_classes"],
                   hidden_sizes=tuple(d["hidden_sizes"]), dropout_p=d["dropout_p"])


class FusionNet:
    def __init__(self, spec: FusionSpec):
        spec.validate()
        self.spec = spec
        self.params: dict[str, Tensor] = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def logits(self, x: Tensor, mode: str = "eval", rng: Optional[np.random.Generator] = None) -> Tensor:
        """x is B×(M·N·K), row-major flattened maps."""
        if x.data.ndim != 2 or x.shape[1] != self.spec.input_size:
            raise T.ShapeError(f"fusion input must be B×{self.spec.input_size}, got {x.shape}")
        h = x
        for layer in range(3):
            h = T.dropout(h, self.spec.dropout_p, rng, mode)
            h = T.relu(T.linear(h, self.params[f"fc{layer}.weight"], self.params[f"fc{layer}.bias"]))
        return T.linear(h, self.params["fc3.weight"], self.params["fc3.bias"])


def build_fusion(spec: FusionSpec, rng: np.random.Generator) -> FusionNet:
    net = FusionNet(spec)
    sizes = [spec.input_size, *spec.hidden_sizes, spec.num_classes]
    for layer, (d_in, d_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = 2.0 if layer < 3 else 1.0
        name = f"fc{layer}"
        net.params[name + ".weight"] = Tensor(rng.normal(0.0, np.sqrt(gain / d_in), (d_in, d_out)),
                                              requires_grad=True, name=name + ".weight")
        net.params[name + ".bias"] = Tensor(np.zeros(d_out), requires_grad=True, name=name + ".bias")
    return net


def maps_to_batch(maps: Sequence[ProbabilityMap]) -> np.ndarray:
    return np.stack([m.flatten() for m in maps])


def fuse_mlp(model: FusionNet, pmap: ProbabilityMap, mode: str = "eval",
             rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Image-level class probabilities from one probability map."""
    if pmap.values.shape != (*model.spec.grid, model.spec.num_classes):
        raise T.ShapeError(
            f"map shape {pmap.values.shape} does not match fusion grid {model.spec.grid}"
            f" with {model.spec.num_classes} classes")
    x = Tensor(pmap.flatten()[None, :])
    return T.softmax(model.logits(x, mode, rng)).data[0]


def predict_image(class_probs) -> int:
    """MAP label; ties go to the lowest class index."""
    p = np.asarray(class_probs, dtype=np.float64)
    _check_fiber(p, 1e-6, "class probability vector")
    return int(np.argmax(p))


def fuse_vote(pmap: ProbabilityMap, strategy: str = "majority") -> int:
    """Vote-based fusion. All strategies break ties toward the lowest class index."""
    strategy = VOTE_ALIASES.get(strategy, strategy)
    fibers = pmap.fibers()
    k = pmap.num_classes
    if strategy == "majority":
        counts = np.bincount(fibers.argmax(axis=1), minlength=k)
        return int(np.argmax(counts))
    if strategy == "max_prob":
        return int(np.argmax(fibers.max(axis=0)))
    if strategy == "sum_prob":
        return int(np.argmax(fibers.sum(axis=0)))
    raise ValueError(f"unknown vote strategy {strategy!r}; choose from {VOTE_STRATEGIES}")
