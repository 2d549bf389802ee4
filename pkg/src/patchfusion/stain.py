"""Macenko H&E stain normalization.

Estimation works on the unique OD vectors of an image weighted by their
pixel counts, so the result depends only on the multiset of pixels: it is
bitwise invariant to pixel order and to duplicating every pixel.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_I0 = 255.0


class StainError(ValueError):
    pass


@dataclass(frozen=True)
class StainProfile:
    stain_matrix: np.ndarray        # 3×2, columns H then E, unit norm
    max_concentrations: np.ndarray  # 2, 99th-percentile concentrations

    def __post_init__(self):
        m = np.asarray(self.stain_matrix, dtype=np.float64)
        c = np.asarray(self.max_concentrations, dtype=np.float64)
        if m.shape != (3, 2) or c.shape != (2,):
            raise StainError(f"bad profile shapes {m.shape}, {c.shape}")
        if np.any(c <= 0):
            raise StainError(f"max concentrations must be positive, got {c}")
        object.__setattr__(self, "stain_matrix", m)
        object.__setattr__(self, "max_concentrations", c)

    def to_json(self) -> str:
        fmt = lambda v: ", ".join(f"{x:.17g}" for x in v)  # noqa: E731
        return ('{"hematoxylin": [%s], "eosin": [%s], "max_concentrations": [%s]}'
                % (fmt(self.stain_matrix[:, 0]), fmt(self.stain_matrix[:, 1]),
                   fmt(self.max_concentrations)))

    @classmethod
    def from_json(cls, text: str) -> "StainProfile":
        d = json.loads(text)
        return cls(np.column_stack([d["hematoxylin"], d["eosin"]]), np.array(d["max_concentrations"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "StainProfile":
        return cls.from_json(Path(path).read_text())


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


REFERENCE_PROFILE = StainProfile(
    np.column_stack([_unit([0.65, 0.70, 0.29]), _unit([0.07, 0.99, 0.11])]),
    np.array([1.9705, 1.0308]) / np.log(10.0),  # classic reference maxima, converted to log10 OD
)


def rgb_to_od(image, i0: float = DEFAULT_I0) -> np.ndarray:
    """Optical density -log10((I + 1) / I0), floored at 0."""
    img = np.asarray(image, dtype=np.float64)
    return np.maximum(-np.log10((img + 1.0) / i0), 0.0)


def od_to_rgb(od, i0: float = DEFAULT_I0) -> np.ndarray:
    """Inverse of :func:`rgb_to_od` on the non-negative OD domain (unquantized)."""
    return i0 * np.power(10.0, -np.asarray(od, dtype=np.float64)) - 1.0


def _weighted_quantile(values: np.ndarray, weights: np.ndarray, q: float) -> float:
    """Inverted-CDF quantile: smallest value whose cumulative weight reaches q/100."""
    order = np.argsort(values, kind="stable")
    cdf = np.cumsum(weights[order])
    idx = int(np.searchsorted(cdf, q / 100.0 * cdf[-1], side="left"))
    return float(values[order][min(idx, len(values) - 1)])


def _unique_pixels(od_field) -> tuple[np.ndarray, np.ndarray]:
    od = np.asarray(od_field, dtype=np.float64).reshape(-1, 3)
    uniq, counts = np.unique(od, axis=0, return_counts=True)
    return uniq, counts.astype(np.float64)


def estimate_stain_profile(od_field, beta: float = 0.15, alpha: float = 1.0,
                           min_pixels: int = 100) -> StainProfile:
    """Estimate H and E stain vectors and max concentrations from an OD field (…×3)."""
    uniq, counts = _unique_pixels(od_field)
    tissue = uniq.max(axis=1) >= beta
    if counts[tissue].sum() < min_pixels:
        raise StainError("insufficient tissue")
    x, w = uniq[tissue], counts[tissue] / counts[tissue].sum()

    mean = w @ x
    xc = x - mean
    cov = (xc * w[:, None]).T @ xc
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= 1e-12 * max(evals[2], 1e-300):
        raise StainError("degenerate OD covariance (rank < 2)")
    e1, e2 = evecs[:, 2], evecs[:, 1]
    # fix signs: e1 along positive OD; e2 with non-positive red so smaller angle = more red = H
    if e1.sum() < 0:
        e1 = -e1
    if e2[0] > 0:
        e2 = -e2
    phi = np.arctan2(x @ e2, x @ e1)
    lo = _weighted_quantile(phi, w, alpha)
    hi = _weighted_quantile(phi, w, 100.0 - alpha)
    v_h = _unit(np.cos(lo) * e1 + np.sin(lo) * e2)
    v_e = _unit(np.cos(hi) * e1 + np.sin(hi) * e2)
    # OD vectors are non-negative; flip if numerics pointed a vector backwards
    v_h = v_h if v_h.sum() >= 0 else -v_h
    v_e = v_e if v_e.sum() >= 0 else -v_e
    matrix = np.column_stack([v_h, v_e])

    conc = _unmix(matrix, uniq)
    wall = counts / counts.sum()
    maxc = np.array([_weighted_quantile(conc[:, s], wall, 99.0) for s in range(2)])
    if np.any(maxc <= 0):
        raise StainError("insufficient tissue")
    return StainProfile(matrix, maxc)


def _unmix(matrix: np.ndarray, od_rows: np.ndarray) -> np.ndarray:
    """Least-squares concentrations (rows × 2) for OD rows (rows × 3)."""
    conc, *_ = np.linalg.lstsq(matrix, od_rows.T, rcond=None)
    return conc.T


def image_profile(image, beta: float = 0.15, alpha: float = 1.0, i0: float = DEFAULT_I0) -> StainProfile:
    return estimate_stain_profile(rgb_to_od(image, i0), beta, alpha)


def normalize_stains(image, source: StainProfile, reference: StainProfile = REFERENCE_PROFILE,
                     i0: float = DEFAULT_I0) -> np.ndarray:
    """Remap an 8-bit RGB image from its source stains onto the reference stains."""
    img = np.asarray(image)
    od = rgb_to_od(img, i0).reshape(-1, 3)
    conc = np.maximum(_unmix(source.stain_matrix, od), 0.0)
    conc *= reference.max_concentrations / source.max_concentrations
    out = od_to_rgb(conc @ reference.stain_matrix.T, i0)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8).reshape(img.shape)


def normalize_image(image, reference: StainProfile = REFERENCE_PROFILE, beta: float = 0.15,
                    alpha: float = 1.0) -> np.ndarray:
    """Estimate the image's own profile, then normalize it to ``reference``."""
    return normalize_stains(image, image_profile(image, beta, alpha), reference)


def angular_error_deg(u, v) -> float:
    c = abs(float(np.dot(_unit(u), _unit(v))))
    return float(np.degrees(np.arccos(min(1.0, c))))
