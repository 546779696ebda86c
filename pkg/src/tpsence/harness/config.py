"""Flat ``key = value`` training configuration."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

from ..losses import ABLATION_VARIANTS, LossConfig
from ..models import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "M7"
    # objective
    tau: float = 0.07
    beta: float = 1.0
    q: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.1
    nce_reduction: str = "mean"
    orientation: str = "clear"
    num_patches: int = 256
    # schedule
    epochs: int = 50
    lr_phase1: float = 2e-4
    lr_phase2: float = 2e-5
    phase_boundary: float = 0.5
    lr_schedule: str = "step"
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 1
    crop_size: int = 64
    iters_per_epoch: int = 0  # 0 = one pass over trainA
    # networks
    ngf: int = 32
    n_res: int = 4
    ndf: int = 32
    embed_dim: int = 64
    taps: tuple[int, ...] = (0, 1, 2, 4)
    # data and randomness
    manifest: str = ""
    num_classes: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(ABLATION_VARIANTS)}")
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 < self.phase_boundary < 1.0:
            raise ConfigError("phase_boundary must be in (0, 1)")
        if self.lr_schedule not in ("step", "linear"):
            raise ConfigError("lr_schedule must be 'step' or 'linear'")
        if self.epochs < 0 or self.batch_size < 1 or self.iters_per_epoch < 0:
            raise ConfigError("epochs, batch_size and iters_per_epoch must be non-negative (batch >= 1)")
        if self.crop_size <= 0 or self.crop_size % 16:
            raise ConfigError("crop_size must be a positive multiple of 16")
        if self.num_patches < 2:
            raise ConfigError("num_patches must be at least 2")
        # delegate range checks
        self.loss_config()
        self.model_config()

    def loss_config(self) -> LossConfig:
        try:
            return LossConfig.for_variant(
                self.variant, tau=self.tau, beta=self.beta, q=self.q, lambda1=self.lambda1,
                lambda2=self.lambda2, lambda3=self.lambda3, nce_reduction=self.nce_reduction)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(self.ngf, self.n_res, self.ndf, self.embed_dim, tuple(self.taps))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def learning_rate(self, epoch: int) -> float:
        """Rate for a 0-based epoch: phase 1 strictly before the boundary epoch."""
        boundary = self.phase_boundary * self.epochs
        if epoch < boundary:
            return self.lr_phase1
        if self.lr_schedule == "step":
            return self.lr_phase2
        remaining = max(self.epochs - boundary, 1.0)
        frac = min((epoch - boundary) / remaining, 1.0)
        return self.lr_phase1 + (self.lr_phase2 - self.lr_phase1) * frac

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> bytes:
        return hashlib.sha256(self.dumps().encode()).digest()


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = _FIELDS[key].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_assignments(lines: Iterable[str], source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, overrides: Iterable[str] = (), **extra) -> TrainConfig:
    """Read a config file (optional), then apply ``key=value`` overrides, then ``extra``."""
    values = {}
    if path is not None:
        p = Path(path)
        values.update(parse_assignments(p.read_text().splitlines(), str(p)))
        if values.get("manifest") and not Path(values["manifest"]).is_absolute():
            values["manifest"] = str((p.parent / values["manifest"]).resolve())
    values.update(parse_assignments(overrides, "--set"))
    values.update({k: v for k, v in extra.items() if v is not None})
    return TrainConfig(**values)
