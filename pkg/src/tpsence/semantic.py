"""Segmentation maps and the mPA / mIoU scores that steer SeNCE."""
from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Mapping

import numpy as np
from PIL import Image


class SegMapError(ValueError):
    pass


@dataclass(frozen=True)
class SegMap:
    classes: np.ndarray  # H×W uint8, row-major
    num_classes: int

    def __post_init__(self):
        arr = np.asarray(self.classes)
        if arr.ndim != 2:
            raise SegMapError(f"segmap must be 2-D, got shape {arr.shape}")
        if not 0 < self.num_classes <= 256:
            raise SegMapError(f"num_classes must be in 1..256, got {self.num_classes}")
        arr = arr.astype(np.uint8, copy=True)
        if arr.size and int(arr.max()) >= self.num_classes:
            raise SegMapError(f"class index {int(arr.max())} out of range for {self.num_classes} classes")
        arr.setflags(write=False)
        object.__setattr__(self, "classes", arr)

    @property
    def height(self) -> int:
        return self.classes.shape[0]

    @property
    def width(self) -> int:
        return self.classes.shape[1]

    def crop(self, top: int, left: int, size: int) -> "SegMap":
        return SegMap(self.classes[top:top + size, left:left + size], self.num_classes)

    def resize(self, height: int, width: int) -> "SegMap":
        # nearest neighbour: class ids must never be interpolated
        img = Image.fromarray(self.classes).resize((width, height), Image.NEAREST)
        return SegMap(np.asarray(img), self.num_classes)


@dataclass(frozen=True)
class SemanticScore:
    mpa: float
    miou: float


def _check_pair(sx: SegMap, sy: SegMap) -> None:
    if sx.classes.shape != sy.classes.shape:
        raise SegMapError(f"segmap shapes differ: {sx.classes.shape} vs {sy.classes.shape}")
    if sx.num_classes != sy.num_classes:
        raise SegMapError(f"class counts differ: {sx.num_classes} vs {sy.num_classes}")
    if sx.classes.size == 0:
        raise SegMapError("empty segmap")


def _confusion(sx: SegMap, sy: SegMap) -> np.ndarray:
    c = sx.num_classes
    idx = sx.classes.astype(np.int64).ravel() * c + sy.classes.astype(np.int64).ravel()
    return np.bincount(idx, minlength=c * c).reshape(c, c)


def mpa(sx: SegMap, sy: SegMap) -> float:
    """Mean per-class pixel accuracy of ``sy`` against reference ``sx``.

    Only classes present in ``sx`` are averaged, so the score is asymmetric.
    """
    _check_pair(sx, sy)
    conf = _confusion(sx, sy)
    support = conf.sum(axis=1)
    present = support > 0
    return float(np.mean(np.diag(conf)[present] / support[present]))


def miou(sx: SegMap, sy: SegMap) -> float:
    """Mean intersection-over-union over classes present in either map."""
    _check_pair(sx, sy)
    conf = _confusion(sx, sy)
    inter = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    present = union > 0
    return float(np.mean(inter[present] / union[present]))


def score(sx: SegMap, sy: SegMap) -> SemanticScore:
    return SemanticScore(mpa(sx, sy), miou(sx, sy))


def load_segmap(path, num_classes: int) -> SegMap:
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "P"):
                raise SegMapError(f"{path}: expected a single-channel 8-bit image, got mode {img.mode}")
            arr = np.asarray(img, dtype=np.uint8)
    except (OSError, FileNotFoundError) as exc:
        raise SegMapError(f"cannot read segmap {path}: {exc}") from exc
    if arr.size and int(arr.max()) >= num_classes:
        raise SegMapError(f"{path}: class index {int(arr.max())} >= num_classes {num_classes}")
    return SegMap(arr, num_classes)


def save_segmap(segmap: SegMap, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(segmap.classes, mode="L").save(path, format="PNG")


class ScoreCache:
    """Memoised semantic scores keyed by (clear id, rainy id).

    ``maps`` maps ids to loaded SegMaps. Writes are serialised; reads of an
    already-computed key never take the lock.
    """

    def __init__(self, clear: Mapping[Hashable, SegMap], rainy: Mapping[Hashable, SegMap]):
        self._clear = dict(clear)
        self._rainy = dict(rainy)
        self._scores: dict[tuple, SemanticScore] = {}
        self._lock = threading.Lock()

    def __call__(self, clear_id, rainy_id) -> SemanticScore:
        key = (clear_id, rainy_id)
        hit = self._scores.get(key)
        if hit is not None:
            return hit
        if clear_id not in self._clear:
            raise KeyError(f"unknown clear id {clear_id!r}")
        if rainy_id not in self._rainy:
            raise KeyError(f"unknown rainy id {rainy_id!r}")
        with self._lock:
            hit = self._scores.get(key)
            if hit is None:
                hit = score(self._clear[clear_id], self._rainy[rainy_id])
                self._scores[key] = hit
        return hit

    def __len__(self) -> int:
        return len(self._scores)


def score_cache(clear: Mapping[Hashable, SegMap], rainy: Mapping[Hashable, SegMap]) -> ScoreCache:
    return ScoreCache(clear, rainy)

