"""Two-sample domain-gap statistics and the point-to-segment diagnostic."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.spatial.distance import cdist, pdist

FEATURE_SIDE = 16


@dataclass(frozen=True)
class DomainReport:
    mmd2: float  # generated vs rainy
    energy_distance: float
    baseline_mmd2: float  # clear vs rainy
    baseline_energy_distance: float
    mean_segment_distance: float
    n_clear: int
    n_rainy: int
    n_generated: int
    n_triples: int
    bandwidth: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "DomainReport":
        return cls(**json.loads(line))


def featurize(image: np.ndarray, side: int = FEATURE_SIDE) -> np.ndarray:
    """Flattened side×side grayscale (channel mean) with box-filter downsampling."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[-1] != 3:
        img = img.transpose(1, 2, 0)
    gray = img.mean(axis=-1) if img.ndim == 3 else img
    h, w = gray.shape
    if h % side == 0 and w % side == 0:
        small = gray.reshape(side, h // side, side, w // side).mean(axis=(1, 3))
    else:
        small = np.asarray(Image.fromarray(gray.astype(np.float32), mode="F")
                           .resize((side, side), Image.BOX), dtype=np.float64)
    return small.reshape(-1)


def _as_matrix(vectors, name: str) -> np.ndarray:
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty list of vectors")
    return arr


def _pair(set_a, set_b) -> tuple[np.ndarray, np.ndarray]:
    a = _as_matrix(set_a, "set_a")
    b = _as_matrix(set_b, "set_b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def median_bandwidth(set_a, set_b) -> float:
    a, b = _pair(set_a, set_b)
    pooled = np.concatenate([a, b])
    d = pdist(pooled)
    pos = d[d > 0]
    return float(np.median(pos)) if pos.size else 1.0


def mmd2(set_a, set_b, bandwidth: float | str = "auto") -> float:
    """Biased (V-statistic) squared MMD with a Gaussian kernel.

    ``bandwidth="auto"`` uses the median non-zero pairwise distance of the pooled sets.
    """
    a, b = _pair(set_a, set_b)
    sigma = median_bandwidth(a, b) if bandwidth == "auto" else float(bandwidth)
    if sigma <= 0:
        raise ValueError("bandwidth must be positive")
    gamma = 1.0 / (2.0 * sigma * sigma)
    kaa = np.exp(-gamma * cdist(a, a, "sqeuclidean")).mean()
    kbb = np.exp(-gamma * cdist(b, b, "sqeuclidean")).mean()
    kab = np.exp(-gamma * cdist(a, b, "sqeuclidean")).mean()
    return max(float(kaa + kbb - 2.0 * kab), 0.0)


def energy_distance(set_a, set_b) -> float:
    a, b = _pair(set_a, set_b)
    ab = cdist(a, b).mean()
    aa = cdist(a, a).mean()
    bb = cdist(b, b).mean()
    return max(float(2.0 * ab - aa - bb), 0.0)


def _flat_triple(dx, dy, dz):
    x, y, z = (np.asarray(getattr(m, "data", m), dtype=np.float64) for m in (dx, dy, dz))
    if not x.shape == y.shape == z.shape:
        raise ValueError(f"map shapes differ: {x.shape}, {y.shape}, {z.shape}")
    return x.reshape(-1), y.reshape(-1), z.reshape(-1)


def point_to_segment(dx, dy, dz) -> float:
    """Distance from dz to the closed segment [dx, dy], divided by sqrt(HW)."""
    x, y, z = _flat_triple(dx, dy, dz)
    v = y - x
    vv = float(v @ v)
    t = 0.0 if vv == 0 else min(max(float((z - x) @ v) / vv, 0.0), 1.0)
    return float(np.linalg.norm(z - x - t * v) / np.sqrt(x.size))


def point_to_line(dx, dy, dz) -> float:
    """Distance from dz to the infinite line through dx and dy, divided by sqrt(HW)."""
    x, y, z = _flat_triple(dx, dy, dz)
    v = y - x
    vv = float(v @ v)
    if vv == 0:
        raise ValueError("dx == dy, the line is undefined")
    t = float((z - x) @ v) / vv
    return float(np.linalg.norm(z - x - t * v) / np.sqrt(x.size))


def domain_report(clear: Sequence[np.ndarray], rainy: Sequence[np.ndarray],
                  generated: Sequence[np.ndarray], d_maps: Iterable[tuple] = (),
                  bandwidth: float | str = "auto") -> DomainReport:
    """Gap statistics of generated-vs-rainy and the clear-vs-rainy baseline.

    Images are featurized with ``featurize``; ``bandwidth="auto"`` fixes one
    median bandwidth from the clear and rainy sets so both MMD values share a kernel.
    """
    fc = np.stack([featurize(im) for im in clear])
    fr = np.stack([featurize(im) for im in rainy])
    fg = np.stack([featurize(im) for im in generated])
    sigma = median_bandwidth(fc, fr) if bandwidth == "auto" else float(bandwidth)
    segs = [point_to_segment(*t) for t in d_maps]
    return DomainReport(
        mmd2=mmd2(fg, fr, sigma),
        energy_distance=energy_distance(fg, fr),
        baseline_mmd2=mmd2(fc, fr, sigma),
        baseline_energy_distance=energy_distance(fc, fr),
        mean_segment_distance=float(np.mean(segs)) if segs else 0.0,
        n_clear=len(fc),
        n_rainy=len(fr),
        n_generated=len(fg),
        n_triples=len(segs),
        bandwidth=sigma,
    )
