"""Parameter containers and the basic layers built on :mod:`hslnet.numcore`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import numcore as nc
from .numcore import Tensor


class Module:
    """Walks attributes in definition order to enumerate named parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = nc.parameter(xavier_uniform(rng, d_in, d_out))
        self.bias = nc.parameter(np.zeros(d_out)) if bias else None

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x) -> Tensor:
        x = nc.as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise ValueError(f"linear layer expects width {self.d_in}, got {x.shape[-1]}")
        if self.bias is None:
            return x @ self.weight if x.ndim > 1 else nc.reshape(x.reshape(1, -1) @ self.weight, (-1,))
        return nc.affine(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, shift: bool = True):
        self.gamma = nc.parameter(np.ones(d))
        self.beta = nc.parameter(np.zeros(d)) if shift else None
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        beta = self.beta if self.beta is not None else Tensor(np.zeros(self.gamma.shape))
        return nc.layer_norm(x, self.gamma, beta, self.eps)
