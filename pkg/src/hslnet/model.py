"""The full network: both encoders plus one similarity head per level."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .data import ObjectFeatureSet, TokenSequence
from .encoders import ImageEncoder, MultiLevelRepr, TextEncoder, encode_image_levels, encode_text_levels
from .layers import Module
from .objective import LossBreakdown, total_loss
from .similarity import GRANULARITIES, IMAGE, OBJECT, GranularityHead, batch_similarity_tables

_SHORT = {OBJECT: "obj", IMAGE: "img"}


@dataclass(frozen=True)
class AblationSpec:
    """Subset of levels (1-based) and granularities that enter the score and loss."""

    levels: tuple[int, ...]
    granularities: tuple[str, ...] = GRANULARITIES

    def __post_init__(self):
        levels = tuple(sorted(set(int(l) for l in self.levels)))
        grans = tuple(g for g in GRANULARITIES if g in set(self.granularities))
        unknown = set(self.granularities) - set(GRANULARITIES)
        if unknown:
            raise ValueError(f"unknown granularity {sorted(unknown)[0]!r}")
        if not levels or not grans:
            raise ValueError("ablation spec needs at least one level and one granularity")
        if levels[0] < 1:
            raise ValueError(f"levels are 1-based, got {levels}")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "granularities", grans)

    @classmethod
    def full(cls, levels: int) -> "AblationSpec":
        return cls(tuple(range(1, levels + 1)), GRANULARITIES)

    @property
    def name(self) -> str:
        return "L" + "+".join(str(l) for l in self.levels) + "/" + "+".join(_SHORT[g] for g in self.granularities)

    def check(self, levels: int) -> None:
        if self.levels[-1] > levels:
            raise ValueError(f"spec {self.name} references level {self.levels[-1]} but the model has {levels}")


class HSLModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, word_vectors: np.ndarray | None = None):
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg, rng)
        self.text_encoder = TextEncoder(cfg, rng, word_vectors)
        self.heads = [GranularityHead(cfg.d_c, cfg.d_e, rng) for _ in range(cfg.levels)]

    def encode_images(self, images: list[ObjectFeatureSet]) -> MultiLevelRepr:
        return encode_image_levels(images, self.image_encoder)

    def encode_queries(self, queries: list[TokenSequence]) -> MultiLevelRepr:
        return encode_text_levels(queries, self.text_encoder)

    def tables(self, images: MultiLevelRepr, queries: MultiLevelRepr, spec: AblationSpec | None = None):
        spec = spec or AblationSpec.full(self.cfg.levels)
        spec.check(self.cfg.levels)
        return batch_similarity_tables(images, queries, self.heads, spec.levels, spec.granularities)

    def loss(self, images: list[ObjectFeatureSet], queries: list[TokenSequence],
             spec: AblationSpec | None = None) -> LossBreakdown:
        """Loss for a batch of aligned pairs (``images[i]`` matches ``queries[i]``)."""
        if len(images) != len(queries):
            raise ValueError(f"{len(images)} images vs {len(queries)} queries")
        tables = self.tables(self.encode_images(images), self.encode_queries(queries), spec)
        return total_loss(tables, self.cfg.lambdas)

    def score_matrix(self, images: MultiLevelRepr, queries: MultiLevelRepr,
                     spec: AblationSpec | None = None, lambdas=None) -> np.ndarray:
        """Hierarchical scores, shape ``(N_img, N_query)``."""
        lambdas = self.cfg.lambdas if lambdas is None else tuple(lambdas)
        tables = self.tables(images, queries, spec)
        per_level: dict[int, np.ndarray] = {}
        for (l, _), t in tables.items():
            per_level[l] = per_level[l] + t.data if l in per_level else t.data
        out = np.zeros(next(iter(tables.values())).shape)
        for l, s in per_level.items():
            out = out + lambdas[l - 1] * s
        return out
