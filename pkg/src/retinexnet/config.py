"""Run configuration as a flat ``key = value`` text file with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .losses import LossWeights
from .model import DecomNetConfig, EnhanceNetConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # architecture
    decom_depth: int = 5
    decom_width: int = 64
    num_scales: int = 3
    enhance_width: int = 64
    # optimisation
    batch: int = 16
    patch: int = 96
    learning_rate: float = 0.001
    lr_decay: float = 0.95
    momentum: float = 0.0
    finetune_lr_scale: float = 0.1
    decom_iterations: int = 2000
    enhance_iterations: int = 2000
    finetune_iterations: int = 1000
    checkpoint_every: int = 500
    seed: int = 0
    init_seed: int = 0
    split_seed: int = 0
    # loss weights
    lambda_ir: float = 0.001
    lambda_is: float = 0.1
    lambda_g: float = 10.0
    lambda_cross: float = 0.001
    stop_weight_gradient: bool = False

    @property
    def decom(self) -> DecomNetConfig:
        return DecomNetConfig(depth=self.decom_depth, width=self.decom_width)

    @property
    def enhance(self) -> EnhanceNetConfig:
        return EnhanceNetConfig(num_scales=self.num_scales, width=self.enhance_width)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_ir, self.lambda_is, self.lambda_g,
                           [[1.0, self.lambda_cross], [self.lambda_cross, 1.0]],
                           self.stop_weight_gradient)

    def phase_config(self, phase: str) -> TrainConfig:
        iterations = {"decom": self.decom_iterations, "enhance": self.enhance_iterations,
                      "finetune": self.finetune_iterations}[phase]
        lr = self.learning_rate * (self.finetune_lr_scale if phase == "finetune" else 1.0)
        return TrainConfig(phase=phase, iterations=iterations, batch=self.batch, patch=self.patch,
                           learning_rate=lr, lr_decay=self.lr_decay, momentum=self.momentum,
                           seed=self.seed, checkpoint_every=self.checkpoint_every,
                           loss_weights=self.loss_weights)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def desk_scale_config(**overrides) -> RunConfig:
    """Width-16 networks on 48x48 synthetic pairs; the whole schedule runs in minutes on a CPU."""
    cfg = RunConfig(decom_width=16, enhance_width=16, batch=8, patch=32, learning_rate=0.05,
                    lr_decay=1.0, momentum=0.9, finetune_lr_scale=0.1, checkpoint_every=0)
    return cfg.replace(**overrides)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        text = repr(value)
        return text[:-2] if text.endswith(".0") else text
    return str(value)


def _parse(text: str, kind, key: str):
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


_TYPES = {"int": int, "float": float, "bool": bool}


def to_text(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def from_text(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    kinds = {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(RunConfig)}
    values, unknown = {}, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            unknown.append(key)
            continue
        values[key] = _parse(val, kinds[key], key)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return base.replace(**values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return from_text(Path(path).read_text(), base)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(to_text(cfg))
