"""Model and training hyperparameters with flat ``key=value`` serialization."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any

ENCODER_KINDS = ("transformer", "bigru")


@dataclass
class ModelConfig:
    levels: int = 2
    d0: int = 2048
    d_c: int = 512
    d_e: int = 1024
    word_dim: int = 300
    encoder: str = "transformer"
    heads: int = 4
    image_layers: int = 3
    text_layers: int = 2
    max_objects: int = 64
    max_tokens: int = 32
    vocab_size: int = 2
    lambdas: tuple[float, ...] = (0.5, 1.0)

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        for name in ("levels", "d0", "d_c", "d_e", "word_dim", "heads", "image_layers",
                     "text_layers", "max_objects", "max_tokens", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.encoder not in ENCODER_KINDS:
            raise ValueError(f"encoder must be one of {ENCODER_KINDS}, got {self.encoder!r}")
        if len(self.lambdas) != self.levels:
            raise ValueError(f"need {self.levels} level weights, got {len(self.lambdas)}")
        if any(x < 0 for x in self.lambdas) or not any(x > 0 for x in self.lambdas):
            raise ValueError(f"level weights must be >= 0 with at least one positive: {self.lambdas}")
        if self.encoder == "transformer" and self.d_c % self.heads:
            raise ValueError(f"d_c={self.d_c} not divisible by heads={self.heads}")
        if self.encoder == "bigru" and self.d_c % 2:
            raise ValueError(f"bigru needs even d_c, got {self.d_c}")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    decay: float = 0.95
    epochs: int = 30
    batch_size: int = 256
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0
    min_count: int = 5

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, like: Any, key: str) -> Any:
    try:
        if isinstance(like, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(like, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ValueError(f"bad value for {key}: {raw!r}") from None
    return raw


def to_items(cfg) -> dict[str, str]:
    return {f.name: _format(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}


def from_items(cls, items: dict[str, str]):
    """Build ``cls`` from string values; unknown keys are rejected."""
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(items) - names)
    if unknown:
        raise KeyError(f"unknown config key: {unknown[0]}")
    kwargs = {k: _parse(v, getattr(defaults, k), k) for k, v in items.items()}
    return cls(**kwargs)


def split_items(items: dict[str, str], *classes) -> list[dict[str, str]]:
    """Partition flat items by the dataclass that owns each key."""
    owned = [{f.name for f in dataclasses.fields(c)} for c in classes]
    parts: list[dict[str, str]] = [{} for _ in classes]
    for k, v in items.items():
        for names, part in zip(owned, parts):
            if k in names:
                part[k] = v
                break
    return parts


def read_kv(path) -> dict[str, str]:
    """Read a ``key=value`` file; ``#`` starts a comment line."""
    items = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            items[key.strip()] = value.strip()
    return items


def write_kv(items: dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in items.items():
            fh.write(f"{k}={v}\n")


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)


__all__ = [
    "ModelConfig",
    "TrainConfig",
    "ENCODER_KINDS",
    "to_items",
    "from_items",
    "split_items",
    "read_kv",
    "write_kv",
    "replace",
]
