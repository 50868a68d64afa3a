"""Configuration dataclasses and the merged run configuration."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import SynthesisSpec


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    D_sem: int = 24
    D_tex: int = 16
    D: int = 32
    T_max: int = 64
    n_heads: int = 4
    clfe_blocks: int = 2
    transformer_layers: int = 2
    ffn_mult: int = 2
    sigma: float = 2.0
    tau: float = 0.7
    K: int = 4
    kernel_sizes: tuple[int, ...] = (1, 3, 8)
    expert_hidden: int | None = None  # defaults to D
    grl_lambda: float = 1.0
    use_gcn: bool = True
    tda_enabled: bool = True
    tda_order: str = "conv_then_pool"
    ln_eps: float = 1e-5

    def validate(self) -> None:
        if min(self.D_sem, self.D_tex, self.D, self.T_max) < 1:
            raise ConfigError("dimensions must be positive")
        if self.D % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} must divide D={self.D}")
        if self.sigma <= 0:
            raise ConfigError("sigma must be > 0")
        if not -1 < self.tau < 1:
            raise ConfigError("tau must lie in (-1, 1)")
        if self.tda_enabled and self.K < 2:
            raise ConfigError("adversarial training needs K >= 2")
        if self.grl_lambda < 0:
            raise ConfigError("grl_lambda must be >= 0")
        if self.tda_order not in ("conv_then_pool", "pool_then_conv"):
            raise ConfigError(f"unknown tda_order {self.tda_order!r}")
        if not self.kernel_sizes or min(self.kernel_sizes) < 1:
            raise ConfigError("kernel sizes must be positive")


@dataclass
class LossWeights:
    vid: float = 0.3
    adv: float = 0.005
    orth: float = 1.0

    def validate(self) -> None:
        if min(self.vid, self.adv, self.orth) < 0:
            raise ConfigError("loss weights must be >= 0")


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float | None = 5.0
    seed: int = 0
    eval_every: int = 1
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        self.weights.validate()


@dataclass
class EvalParams:
    theta: float = 0.5
    min_len: int = 2
    max_gap: int = 1
    thresholds: tuple[float, ...] = (0.5, 0.75, 0.95)

    def validate(self) -> None:
        if not 0 < self.theta < 1:
            raise ConfigError("theta must lie in (0, 1)")
        if self.min_len < 1 or self.max_gap < 0:
            raise ConfigError("min_len >= 1 and max_gap >= 0 required")


@dataclass
class RunConfig:
    synth: SynthesisSpec = field(default_factory=SynthesisSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalParams = field(default_factory=EvalParams)
    data_dir: str | None = None  # existing dataset; synthesised into the run directory when unset

    def validate(self) -> None:
        try:
            self.synth.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        if self.data_dir is None:
            mismatched = [k for k in ("D_sem", "D_tex", "K") if getattr(self.synth, k) != getattr(self.model, k)]
            if mismatched:
                raise ConfigError(f"synth and model disagree on {mismatched}")
            if self.synth.T > self.model.T_max:
                raise ConfigError("synth.T exceeds model.T_max")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        cfg = cls()
        for key, value in d.items():
            _set_path(cfg, key.split("."), value)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def apply_override(self, text: str) -> None:
        if "=" not in text:
            raise ConfigError(f"override {text!r} is not key=value")
        key, raw = text.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(self, key.strip().split("."), value)

    def echo(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _coerce(current, value, where: str):
    if dataclasses.is_dataclass(current):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        for k, v in value.items():
            _set_path(current, [k], v)
        return current
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(value)
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(current, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    return value


def _set_path(obj, parts: list[str], value) -> None:
    name = parts[0]
    if not dataclasses.is_dataclass(obj) or name not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {'.'.join(parts)!r} on {type(obj).__name__}")
    if len(parts) > 1:
        _set_path(getattr(obj, name), parts[1:], value)
        return
    current = getattr(obj, name)
    if current is None or value is None:
        setattr(obj, name, value)
    else:
        setattr(obj, name, _coerce(current, value, name))
