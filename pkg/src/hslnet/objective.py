"""Contrastive matching loss over in-batch similarity tables and its level-weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor


def matching_loss(table) -> Tensor:
    """Mean over rows of ``-log softmax(row)[diagonal]``.

    Row ``i`` holds one image's similarities to every query in the batch,
    and column ``i`` is its matched query.
    """
    S = nc.as_tensor(table)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 1:
        raise ValueError(f"matching loss needs a nonempty square table, got {S.shape}")
    N = S.shape[0]
    diag = S[np.arange(N), np.arange(N)]
    return (nc.logsumexp(S, axis=1) - diag).mean()


@dataclass
class LossBreakdown:
    components: dict[tuple[int, str], Tensor]
    total: Tensor
    lambdas: tuple[float, ...]

    def values(self) -> dict[tuple[int, str], float]:
        return {k: v.item() for k, v in self.components.items()}


def total_loss(tables: dict[tuple[int, str], Tensor], lambdas) -> LossBreakdown:
    """Sum over ``(level, granularity)`` tables of ``lambda_level * matching_loss``."""
    lambdas = tuple(float(x) for x in lambdas)
    if not tables:
        raise ValueError("no similarity tables")
    if max(l for l, _ in tables) > len(lambdas):
        raise ValueError(f"tables reference level {max(l for l, _ in tables)} but only {len(lambdas)} weights given")
    if any(x < 0 for x in lambdas):
        raise ValueError(f"level weights must be nonnegative: {lambdas}")
    components = {key: matching_loss(S) for key, S in sorted(tables.items())}
    total = None
    for (l, _), loss in components.items():
        term = loss * lambdas[l - 1]
        total = term if total is None else total + term
    return LossBreakdown(components, total, lambdas)
