"""Desk-scale generator, patch discriminator, projection heads and patch sampler.

Parameters are plain ``dict[str, Tensor]`` records so they can be checkpointed
and optimised without any module machinery.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import substrate as S
from .losses import PatchSet
from .substrate import Tensor

Params = dict[str, Tensor]

INIT_STD = 0.02
# keeps atanh of the input finite for pixels at exactly 0 or 1
INPUT_CLIP = 0.999


@dataclass(frozen=True)
class ModelConfig:
    ngf: int = 32
    n_res: int = 4
    ndf: int = 32
    embed_dim: int = 64
    taps: tuple[int, ...] = (0, 1, 2, 4)

    def __post_init__(self):
        n_layers = 3 + self.n_res
        for t in self.taps:
            if not 0 <= t < n_layers:
                raise ValueError(f"encoder tap {t} outside 0..{n_layers - 1}")
        if len(set(self.taps)) != len(self.taps):
            raise ValueError("encoder taps must be distinct")

    def encoder_channels(self) -> list[int]:
        down = [self.ngf, self.ngf * 2, self.ngf * 4]
        return down + [self.ngf * 4] * self.n_res


@dataclass
class Networks:
    generator: Params
    discriminator: Params
    heads: Params

    def all(self) -> Params:
        out: Params = {}
        for prefix, group in (("G", self.generator), ("D", self.discriminator), ("H", self.heads)):
            for name, t in group.items():
                out[f"{prefix}.{name}"] = t
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, np.ndarray]) -> "Networks":
        groups: dict[str, Params] = {"G": {}, "D": {}, "H": {}}
        for key, arr in flat.items():
            prefix, name = key.split(".", 1)
            groups[prefix][name] = Tensor(arr, requires_grad=True, name=key)
        return cls(groups["G"], groups["D"], groups["H"])


def _shapes(cfg: ModelConfig) -> dict[str, dict[str, tuple[int, ...]]]:
    g: dict[str, tuple[int, ...]] = {}
    chans = [3, cfg.ngf, cfg.ngf * 2, cfg.ngf * 4]
    for k in range(3):
        g[f"down{k}.w"] = (chans[k + 1], chans[k], 3, 3)
        g[f"down{k}.b"] = (chans[k + 1],)
    c = chans[-1]
    for r in range(cfg.n_res):
        for j in (1, 2):
            g[f"res{r}.conv{j}.w"] = (c, c, 3, 3)
            g[f"res{r}.conv{j}.b"] = (c,)
    ups = [c, cfg.ngf * 2, cfg.ngf, 3]
    for k in range(3):
        g[f"up{k}.w"] = (ups[k], ups[k + 1], 4, 4)
        g[f"up{k}.b"] = (ups[k + 1],)

    d: dict[str, tuple[int, ...]] = {}
    dch = [3, cfg.ndf, cfg.ndf * 2, cfg.ndf * 4, 1]
    for k in range(4):
        d[f"conv{k}.w"] = (dch[k + 1], dch[k], 4, 4)
        d[f"conv{k}.b"] = (dch[k + 1],)

    h: dict[str, tuple[int, ...]] = {}
    enc = cfg.encoder_channels()
    for t in cfg.taps:
        h[f"tap{t}.fc1.w"] = (enc[t], cfg.embed_dim)
        h[f"tap{t}.fc1.b"] = (cfg.embed_dim,)
        h[f"tap{t}.fc2.w"] = (cfg.embed_dim, cfg.embed_dim)
        h[f"tap{t}.fc2.b"] = (cfg.embed_dim,)
    return {"G": g, "D": d, "H": h}


def parameter_count(cfg: ModelConfig) -> dict[str, int]:
    return {k: int(sum(np.prod(s) for s in shapes.values())) for k, shapes in _shapes(cfg).items()}


def init_params(seed: int, cfg: ModelConfig = ModelConfig()) -> Networks:
    """Weights ~ N(0, 0.02^2), biases zero; a pure function of ``seed``."""
    rng = np.random.default_rng(seed)
    groups = {}
    for prefix, shapes in _shapes(cfg).items():
        group: Params = {}
        for name, shape in shapes.items():
            if name.endswith(".b"):
                arr = np.zeros(shape)
            else:
                arr = rng.normal(0.0, INIT_STD, size=shape)
            group[name] = Tensor(arr, requires_grad=True, name=f"{prefix}.{name}")
        groups[prefix] = group
    return Networks(groups["G"], groups["D"], groups["H"])


def _as_batch(image) -> Tensor:
    t = S.as_tensor(image)
    if t.ndim == 3:
        t = S.reshape(t, (1,) + t.shape)
    if t.ndim != 4 or t.shape[1] != 3:
        raise S.ShapeError(f"expected a 3×H×W image, got {t.shape}")
    return t


def _encoder_layers(params: Params, x: Tensor, n_res: int, upto: int):
    """Yield post-activation feature maps of encoder layers 0..upto."""
    h = x * 2.0 - 1.0
    for k in range(3):
        h = S.relu(S.instance_norm(S.conv2d(h, params[f"down{k}.w"], params[f"down{k}.b"], 2, 1)))
        yield h
        if k == upto:
            return
    for r in range(n_res):
        y = S.relu(S.instance_norm(
            S.conv2d(h, params[f"res{r}.conv1.w"], params[f"res{r}.conv1.b"], 1, 1)))
        y = S.instance_norm(S.conv2d(y, params[f"res{r}.conv2.w"], params[f"res{r}.conv2.b"], 1, 1))
        h = h + y
        yield h
        if 3 + r == upto:
            return


def _check_generator_input(x: Tensor) -> None:
    h, w = x.shape[2:]
    if h % 8 or w % 8 or h == 0 or w == 0:
        raise S.ShapeError(f"generator input must have H, W multiples of 8, got {h}×{w}")


def generator_forward(params: Params, image, cfg: ModelConfig = ModelConfig(),
                      return_taps: bool = False):
    """Translate a 3×H×W (or 1×3×H×W) image in [0,1]; output has the same shape, in (0,1).

    The decoder output is added to atanh(2x - 1) before the tanh, so a
    near-zero decoder reproduces the input (identity-dominant start).
    """
    x = _as_batch(image)
    _check_generator_input(x)
    n_layers = 3 + cfg.n_res
    feats = list(_encoder_layers(params, x, cfg.n_res, n_layers - 1))
    h = feats[-1]
    for k in range(3):
        h = S.conv_transpose2d(h, params[f"up{k}.w"], params[f"up{k}.b"], 2, 1)
        if k < 2:
            h = S.relu(S.instance_norm(h))
    skip = np.arctanh(np.clip(2.0 * x.data - 1.0, -INPUT_CLIP, INPUT_CLIP))
    out = (S.tanh(h + skip) + 1.0) * 0.5
    if S.as_tensor(image).ndim == 3:
        out = S.reshape(out, out.shape[1:])
    if return_taps:
        return out, [feats[t] for t in cfg.taps]
    return out


def encode(params: Params, image, cfg: ModelConfig = ModelConfig()) -> list[Tensor]:
    """Feature maps of the generator encoder at ``cfg.taps``."""
    x = _as_batch(image)
    _check_generator_input(x)
    feats = list(_encoder_layers(params, x, cfg.n_res, max(cfg.taps)))
    return [feats[t] for t in cfg.taps]


def discriminator_forward(params: Params, image) -> Tensor:
    """H/16 × W/16 map of real-probabilities in (0,1)."""
    x = _as_batch(image)
    h, w = x.shape[2:]
    if h % 16 or w % 16 or h == 0 or w == 0:
        raise S.ShapeError(f"discriminator input must have H, W multiples of 16, got {h}×{w}")
    y = x * 2.0 - 1.0
    for k in range(4):
        y = S.conv2d(y, params[f"conv{k}.w"], params[f"conv{k}.b"], 2, 1)
        if k == 3:
            break
        if k > 0:
            y = S.instance_norm(y)
        y = S.leaky_relu(y, 0.2)
    return S.reshape(S.sigmoid(y), (h // 16, w // 16))


def project(heads: Params, tap: int, vectors: Tensor) -> Tensor:
    hid = S.relu(S.matmul(vectors, heads[f"tap{tap}.fc1.w"]) + heads[f"tap{tap}.fc1.b"])
    out = S.matmul(hid, heads[f"tap{tap}.fc2.w"]) + heads[f"tap{tap}.fc2.b"]
    return S.l2_normalize(out, axis=1)


def sample_locations(height: int, width: int, n: int, rng) -> np.ndarray:
    if n > height * width:
        raise ValueError(f"cannot draw {n} patches from a {height}×{width} feature map")
    rng = np.random.default_rng(rng)
    return rng.permutation(height * width)[:n]


def _rows(feature: Tensor, locs: np.ndarray) -> Tensor:
    c = feature.shape[1]
    flat = S.transpose(S.reshape(feature, (c, -1)))  # HW×C
    return S.gather(flat, locs, axis=0)


def sample_patches(features_x: Sequence[Tensor], features_z: Sequence[Tensor], heads: Params,
                   taps: Sequence[int], n: int, rng, detach_positives: bool = True,
                   orientation: str = "clear") -> list[PatchSet]:
    """One PatchSet per tap; X and Z rows share the same drawn locations.

    ``rng`` is a seed or ``np.random.Generator``; locations are drawn without
    replacement, one draw per tap, in tap order.
    """
    rng = np.random.default_rng(rng)
    out = []
    for tap, fx, fz in zip(taps, features_x, features_z):
        if fx.shape != fz.shape:
            raise S.ShapeError(f"tap {tap}: X features {fx.shape} vs Z features {fz.shape}")
        locs = sample_locations(fx.shape[2], fx.shape[3], n, rng)
        pos = project(heads, tap, _rows(fx, locs))
        if detach_positives:
            pos = pos.detach()
        anc = project(heads, tap, _rows(fz, locs))
        out.append(PatchSet(anc, pos, orientation))
    return out
