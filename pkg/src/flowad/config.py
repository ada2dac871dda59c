"""Training configuration and its flat key=value text format."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    warmup_frac: float = 0.10
    patience: int = 3
    B: int = 3  # prompts per bank
    K: int = 10  # planar layers
    P: int = 5  # context vectors per prompt
    Q: int = 5  # state vectors per prompt
    R_train: int = 1  # Monte Carlo samples per training step
    R_infer: int = 10  # Monte Carlo samples at inference
    layers: tuple = (6, 12, 18, 24)  # encoder layer indices stamped in records
    logit_scale: float = 100.0
    seed: int = 0

    def __post_init__(self):
        self.layers = tuple(int(x) for x in self.layers)
        for f in fields(self):
            if f.name in ("layers", "seed", "warmup_frac"):
                continue
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        if not self.layers:
            raise ConfigError("layers must be non-empty")

    def to_text(self):
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "layers":
                value = ",".join(str(v) for v in value)
            out.append(f"{f.name} = {value}")
        return "\n".join(out) + "\n"


_INT_KEYS = {"batch_size", "epochs", "patience", "B", "K", "P", "Q", "R_train", "R_infer", "seed"}
_FLOAT_KEYS = {"lr", "warmup_frac", "logit_scale"}


def parse_config_text(text):
    """Parse `key = value` lines (# comments allowed) into a TrainConfig."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        value = value.strip()
        if key in _INT_KEYS:
            values[key] = int(value)
        elif key in _FLOAT_KEYS:
            values[key] = float(value)
        elif key == "layers":
            values[key] = tuple(int(v) for v in value.split(","))
        else:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
    return TrainConfig(**values)


def load_config(path):
    return parse_config_text(Path(path).read_text())


def save_config(path, config):
    Path(path).write_text(config.to_text())
