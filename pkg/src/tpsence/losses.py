"""Training objectives: TPS / PTL geometry, adversarial BCE, and the NCE family.

Patch embeddings follow the generator-anchor arrangement: anchor ``z_i`` comes
from the generated image, the positive ``x_i`` and the negatives ``x_j`` from
the clear image.  ``PatchSet.orientation = "generated"`` flips to the literal
``x_i . z_j`` negatives instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import substrate as S
from .substrate import Tensor

NCE_VARIANTS = ("patchnce", "monce_hard", "monce_easy", "sence_mpa", "sence_miou")
GEOM_VARIANTS = ("none", "ptl", "tps")

# ablation rows: id -> (geometric constraint, NCE)
ABLATION_VARIANTS: dict[str, tuple[str, str]] = {
    "M1": ("none", "patchnce"),
    "M2": ("ptl", "patchnce"),
    "M3": ("tps", "patchnce"),
    "M4": ("none", "monce_hard"),
    "M5": ("none", "sence_mpa"),
    "M6": ("tps", "sence_miou"),
    "M7": ("tps", "sence_mpa"),
}

PROB_EPS = 1e-7


class LossConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    beta: float = 1.0
    q: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.1
    nce_variant: str = "sence_mpa"
    geom_variant: str = "tps"
    # "mean" divides each NCE sum by the patch count before weighting
    nce_reduction: str = "mean"

    def __post_init__(self):
        if self.tau <= 0 or self.beta <= 0:
            raise LossConfigError("temperatures tau and beta must be positive")
        if self.q < 0:
            raise LossConfigError("q must be non-negative")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise LossConfigError("lambda weights must be non-negative")
        if self.nce_variant not in NCE_VARIANTS:
            raise LossConfigError(f"unknown nce_variant {self.nce_variant!r}")
        if self.geom_variant not in GEOM_VARIANTS:
            raise LossConfigError(f"unknown geom_variant {self.geom_variant!r}")
        if self.nce_reduction not in ("mean", "sum"):
            raise LossConfigError(f"unknown nce_reduction {self.nce_reduction!r}")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "LossConfig":
        try:
            geom, nce = ABLATION_VARIANTS[variant]
        except KeyError:
            raise LossConfigError(f"unknown variant id {variant!r}") from None
        return cls(geom_variant=geom, nce_variant=nce, **overrides)


@dataclass
class PatchSet:
    anchors: Tensor  # N×d, from the generated image
    positives: Tensor  # N×d, from the clear image, row-aligned with anchors
    orientation: str = field(default="clear")

    def __post_init__(self):
        if self.anchors.ndim != 2 or self.anchors.shape != self.positives.shape:
            raise S.ShapeError(
                f"anchors {self.anchors.shape} and positives {self.positives.shape} must be equal N×d")
        if self.orientation not in ("clear", "generated"):
            raise ValueError(f"orientation must be 'clear' or 'generated', got {self.orientation!r}")

    @property
    def n(self) -> int:
        return self.anchors.shape[0]

    def similarities(self) -> Tensor:
        """N×N matrix: diagonal holds positive pairs, off-diagonal the anchor-negative pairs."""
        if self.orientation == "clear":
            return S.matmul(self.anchors, S.transpose(self.positives))
        return S.matmul(self.positives, S.transpose(self.anchors))


# ---------------------------------------------------------------- geometry


def _check_maps(*maps: Tensor) -> None:
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise S.ShapeError(f"discriminator maps differ in shape: {[m.shape for m in maps]}")


def tps_loss(dx, dy, dz) -> Tensor:
    """Mean triangle slack |dx-dz| + |dy-dz| - |dx-dy| over the map.

    Evaluated through the identity slack = 2 * dist(dz, [min(dx,dy), max(dx,dy)]),
    which is exactly zero whenever dz lies between the endpoints.
    """
    dx, dy, dz = S.as_tensor(dx), S.as_tensor(dy), S.as_tensor(dz)
    _check_maps(dx, dy, dz)
    hi = S.maximum(dx, dy)
    lo = S.minimum(dx, dy)
    outside = S.relu(dz - hi) + S.relu(lo - dz)
    return S.mean(outside) * 2.0


def tps_loss_abs(dx, dy, dz) -> Tensor:
    """Literal three-abs form of the TPS loss; numerically equal to ``tps_loss`` up to rounding."""
    dx, dy, dz = S.as_tensor(dx), S.as_tensor(dy), S.as_tensor(dz)
    _check_maps(dx, dy, dz)
    return S.mean(S.abs(dx - dz) + S.abs(dy - dz) - S.abs(dx - dy))


def ptl_loss(dx, dy, dz) -> Tensor:
    """Distance from dz to the infinite line through dx and dy, divided by sqrt(HW)."""
    dx, dy, dz = S.as_tensor(dx), S.as_tensor(dy), S.as_tensor(dz)
    _check_maps(dx, dy, dz)
    if np.array_equal(dx.data, dy.data):
        raise ValueError("ptl_loss: dx == dy, the line is undefined")
    x, y, z = (S.reshape(m, (-1,)) for m in (dx, dy, dz))
    v = y - x
    u = z - x
    t = S.sum(u * v) / S.sum(v * v)
    r = u - t * v
    return S.pow(S.sum(r * r), 0.5) / float(np.sqrt(dx.size))


# ---------------------------------------------------------------- adversarial


def gan_losses(d_real, d_fake) -> tuple[Tensor, Tensor]:
    """Binary cross-entropy discriminator and generator losses.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    d_real = S.clamp(S.as_tensor(d_real), PROB_EPS, 1.0 - PROB_EPS)
    d_fake = S.clamp(S.as_tensor(d_fake), PROB_EPS, 1.0 - PROB_EPS)
    loss_d = -S.mean(S.log(d_real)) - S.mean(S.log(1.0 - d_fake))
    loss_g = -S.mean(S.log(d_fake))
    return loss_d, loss_g


def discriminator_loss(d_real, d_fake) -> Tensor:
    return gan_losses(d_real, d_fake)[0]


def generator_gan_loss(d_fake) -> Tensor:
    d_fake = S.clamp(S.as_tensor(d_fake), PROB_EPS, 1.0 - PROB_EPS)
    return -S.mean(S.log(d_fake))


# ---------------------------------------------------------------- NCE family


def _offdiag_index(n: int) -> np.ndarray:
    flat = np.arange(n * n).reshape(n, n)
    return flat[~np.eye(n, dtype=bool)]


def offdiagonal(sims: Tensor) -> Tensor:
    """N×N -> N×(N-1), dropping the diagonal row by row."""
    n = sims.shape[0]
    return S.reshape(S.gather(S.reshape(sims, (-1,)), _offdiag_index(n)), (n, n - 1))


def diagonal(sims: Tensor) -> Tensor:
    n = sims.shape[0]
    return S.gather(S.reshape(sims, (-1,)), np.arange(n) * (n + 1))


def _check_patchset(ps: PatchSet) -> None:
    if ps.n < 2:
        raise ValueError(f"NCE losses need at least 2 patches, got {ps.n}")


def patch_nce(ps: PatchSet, tau: float) -> Tensor:
    _check_patchset(ps)
    logits = ps.similarities() / tau
    shift = logits.data.max(axis=1, keepdims=True)  # constant; cancels in the ratio
    shifted = logits - shift
    lse = S.log(S.sum(S.exp(shifted), axis=1))
    return S.sum(lse - diagonal(shifted))


def sence_force(sim, mpa: float):
    """Blend of hard (sim) and easy (1 - sim) pushing force by semantic similarity."""
    return (1.0 - mpa) * sim + mpa * (1.0 - sim)


def monce_weights(sims, mode: str, beta: float) -> Tensor:
    """Per-anchor softmax over the N-1 negatives of sim/beta (hard) or (1-sim)/beta (easy)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    sims = S.as_tensor(sims)
    if sims.ndim != 2 or sims.shape[0] != sims.shape[1]:
        raise S.ShapeError(f"similarities must be N×N, got {sims.shape}")
    neg = offdiagonal(sims)
    if mode == "hard":
        return S.softmax(neg / beta, axis=1)
    if mode == "easy":
        return S.softmax((1.0 - neg) / beta, axis=1)
    raise ValueError(f"mode must be 'hard' or 'easy', got {mode!r}")


def sence_weights(sims, mpa: float, beta: float) -> Tensor:
    if beta <= 0:
        raise ValueError("beta must be positive")
    neg = offdiagonal(S.as_tensor(sims))
    return S.softmax(sence_force(neg, mpa) / beta, axis=1)


def weighted_nce(sims: Tensor, weights: Tensor, tau: float, q: float) -> Tensor:
    """-sum_i log(e^{s_ii/t} / (e^{s_ii/t} + q(N-1) sum_{j!=i} w_ij e^{s_ij/t}))."""
    n = sims.shape[0]
    logits = sims / tau
    shift = logits.data.max(axis=1, keepdims=True)
    shifted = logits - shift
    pos = diagonal(shifted)
    num = S.exp(pos)
    neg = S.sum(weights * S.exp(offdiagonal(shifted)), axis=1)
    denom = num + neg * (q * (n - 1))
    return S.sum(S.log(denom) - pos)


def monce_loss(ps: PatchSet, tau: float, beta: float, q: float, mode: str) -> Tensor:
    _check_patchset(ps)
    sims = ps.similarities()
    return weighted_nce(sims, monce_weights(sims, mode, beta), tau, q)


def sence_loss(ps: PatchSet, mpa: float, tau: float, beta: float, q: float) -> Tensor:
    """NCE with negatives weighted by softmax of the semantic force; ``mpa`` is a constant."""
    _check_patchset(ps)
    if not 0.0 <= mpa <= 1.0:
        raise ValueError(f"mpa must be in [0, 1], got {mpa}")
    sims = ps.similarities()
    return weighted_nce(sims, sence_weights(sims, mpa, beta), tau, q)


def nce_loss(ps: PatchSet, cfg: LossConfig, semantic: Mapping[str, float] | None = None) -> Tensor:
    """Dispatch to the configured NCE variant, applying ``cfg.nce_reduction``."""
    variant = cfg.nce_variant
    if variant == "patchnce":
        loss = patch_nce(ps, cfg.tau)
    elif variant in ("monce_hard", "monce_easy"):
        loss = monce_loss(ps, cfg.tau, cfg.beta, cfg.q, variant.split("_")[1])
    else:
        key = variant.split("_")[1]
        if semantic is None or key not in semantic:
            raise ValueError(f"{variant} needs a '{key}' semantic score for the sampled pair")
        loss = sence_loss(ps, float(semantic[key]), cfg.tau, cfg.beta, cfg.q)
    return loss / ps.n if cfg.nce_reduction == "mean" else loss


def geometric_loss(cfg: LossConfig, dx, dy, dz) -> Tensor | None:
    if cfg.geom_variant == "tps":
        return tps_loss(dx, dy, dz)
    if cfg.geom_variant == "ptl":
        return ptl_loss(dx, dy, dz)
    return None


def composite_objective(parts: Mapping[str, Tensor | float | None], cfg: LossConfig) -> Tensor:
    """lambda1 * gan + lambda2 * nce + lambda3 * geom; geom is skipped when geom_variant is none."""
    for key in ("gan", "nce"):
        if parts.get(key) is None:
            raise KeyError(f"composite objective is missing the '{key}' term")
    total = S.as_tensor(parts["gan"]) * cfg.lambda1 + S.as_tensor(parts["nce"]) * cfg.lambda2
    if cfg.geom_variant != "none":
        if parts.get("geom") is None:
            raise KeyError(f"composite objective is missing the '{cfg.geom_variant}' geometric term")
        total = total + S.as_tensor(parts["geom"]) * cfg.lambda3
    return total
