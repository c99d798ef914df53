"""Stacked per-level encoders for region features and query words.

Both modalities share the same layout: a linear projection to width ``d_c``
followed by ``L`` encoders, each consuming the previous level's output. The
output of every level is kept. Sequences inside a batch are padded to the
longest one and carry a boolean mask that attention and pooling respect.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .config import ModelConfig
from .data import ObjectFeatureSet, TokenSequence, pad_features, pad_tokens
from .layers import LayerNorm, Linear, Module, xavier_uniform
from .numcore import Tensor


@dataclass
class MultiLevelRepr:
    """Per-level ``(B, T, d_c)`` outputs with the shared ``(B, T)`` mask."""

    levels: list[Tensor]
    mask: np.ndarray

    def __len__(self) -> int:
        return len(self.levels)

    def level(self, l: int) -> Tensor:
        """1-based level access."""
        return self.levels[l - 1]

    def item(self, b: int) -> "MultiLevelRepr":
        """Unpadded single-example view (values only, no graph)."""
        count = int(self.mask[b].sum())
        return MultiLevelRepr(
            [Tensor(x.data[b:b + 1, :count]) for x in self.levels],
            self.mask[b:b + 1, :count].copy(),
        )


class MultiHeadSelfAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.query = Linear(d, d, rng)
        # a key bias only adds a per-query constant to the scores, which softmax removes
        self.key = Linear(d, d, rng, bias=False)
        self.value = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        B, T, d = x.shape
        h, dh = self.heads, d // self.heads

        def split(t: Tensor) -> Tensor:
            return t.reshape(B, T, h, dh).transpose(0, 2, 1, 3)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = (q @ k.swapaxes(-1, -2)) / math.sqrt(dh)
        weights = nc.softmax(scores, axis=-1, mask=mask[:, None, None, :])
        self.last_weights = weights.data
        mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        return self.out(mixed)


class TransformerBlock(Module):
    """Post-norm block: LN(x + MHSA(x)), then LN(y + FFN(y)) with a 4x ReLU FFN."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, out_shift: bool = True):
        self.attention = MultiHeadSelfAttention(d, heads, rng)
        self.norm1 = LayerNorm(d)
        self.ff_in = Linear(d, 4 * d, rng)
        self.ff_out = Linear(4 * d, d, rng)
        self.norm2 = LayerNorm(d, shift=out_shift)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        y = self.norm1(x + self.attention(x, mask))
        return self.norm2(y + self.ff_out(nc.relu(self.ff_in(y))))


class TransformerLevel(Module):
    def __init__(self, d: int, heads: int, sublayers: int, rng: np.random.Generator, out_shift: bool = True):
        self.blocks = [TransformerBlock(d, heads, rng, out_shift or i < sublayers - 1) for i in range(sublayers)]

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        for block in self.blocks:
            x = block(x, mask)
        return x


class GRUDirection(Module):
    """Gate order (reset, update, candidate)."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.w_in = nc.parameter(xavier_uniform(rng, d_in, 3 * hidden))
        self.b_in = nc.parameter(np.zeros(3 * hidden))
        self.w_hid = nc.parameter(xavier_uniform(rng, hidden, 3 * hidden))
        self.b_hid = nc.parameter(np.zeros(3 * hidden))

    def __call__(self, x: Tensor, mask: np.ndarray, reverse: bool) -> Tensor:
        B, T, _ = x.shape
        H = self.hidden
        gates_in = x @ self.w_in + self.b_in
        state: Tensor = Tensor(np.zeros((B, H)))
        outputs: list[Tensor | None] = [None] * T
        for t in (range(T - 1, -1, -1) if reverse else range(T)):
            gi = gates_in[:, t, :]
            gh = state @ self.w_hid + self.b_hid
            reset = nc.sigmoid(gi[:, :H] + gh[:, :H])
            update = nc.sigmoid(gi[:, H:2 * H] + gh[:, H:2 * H])
            candidate = nc.tanh(gi[:, 2 * H:] + reset * gh[:, 2 * H:])
            new_state = (1.0 - update) * candidate + update * state
            # padded steps carry the previous state through unchanged
            state = nc.where(mask[:, t, None], new_state, state)
            outputs[t] = state
        return nc.stack(outputs, axis=1)


class BiGRULevel(Module):
    """One bidirectional GRU layer, ``d_c / 2`` units per direction, outputs concatenated."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.forward_gru = GRUDirection(d, d // 2, rng)
        self.backward_gru = GRUDirection(d, d // 2, rng)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        return nc.concat([self.forward_gru(x, mask, reverse=False), self.backward_gru(x, mask, reverse=True)], axis=-1)


def _make_level(cfg: ModelConfig, sublayers: int, rng: np.random.Generator, out_shift: bool = True) -> Module:
    if cfg.encoder == "transformer":
        return TransformerLevel(cfg.d_c, cfg.heads, sublayers, rng, out_shift)
    return BiGRULevel(cfg.d_c, rng)


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates[: d // 2])
    return pe


def project_input(x, layer: Linear) -> Tensor:
    """Position-wise affine map to the encoder width."""
    return layer(x)


class ImageEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.proj = Linear(cfg.d0, cfg.d_c, rng)
        self.levels = [_make_level(cfg, cfg.image_layers, rng) for _ in range(cfg.levels)]

    def __call__(self, features, mask: np.ndarray) -> MultiLevelRepr:
        features = nc.as_tensor(features)
        if features.shape[1] > self.cfg.max_objects:
            raise ValueError(f"{features.shape[1]} objects exceeds max_objects={self.cfg.max_objects}")
        x = project_input(features, self.proj)
        outs = []
        for level in self.levels:
            x = level(x, mask)
            outs.append(x)
        return MultiLevelRepr(outs, mask)


class TextEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, word_vectors: np.ndarray | None = None):
        self.cfg = cfg
        if word_vectors is None:
            word_vectors = xavier_uniform(rng, cfg.vocab_size, cfg.word_dim)
        if word_vectors.shape != (cfg.vocab_size, cfg.word_dim):
            raise ValueError(f"word vector table shape {word_vectors.shape} != {(cfg.vocab_size, cfg.word_dim)}")
        self.embedding = nc.parameter(word_vectors)
        self.proj = Linear(cfg.word_dim, cfg.d_c, rng)
        # The deepest level feeds only the bias-free query projections, so a
        # shift on its output would move every query alike and cancel in the loss.
        self.levels = [_make_level(cfg, cfg.text_layers, rng, out_shift=l < cfg.levels - 1) for l in range(cfg.levels)]

    def __call__(self, ids: np.ndarray, mask: np.ndarray) -> MultiLevelRepr:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[1] > self.cfg.max_tokens:
            raise ValueError(f"{ids.shape[1]} tokens exceeds max_tokens={self.cfg.max_tokens}")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise ValueError(f"token id out of range for vocabulary of size {self.cfg.vocab_size}")
        x = project_input(nc.embedding(self.embedding, ids), self.proj)
        if self.cfg.encoder == "transformer":
            x = x + sinusoidal_positions(ids.shape[1], self.cfg.d_c)
        outs = []
        for level in self.levels:
            x = level(x, mask)
            outs.append(x)
        return MultiLevelRepr(outs, mask)


def encode_image_levels(images: ObjectFeatureSet | list[ObjectFeatureSet], encoder: ImageEncoder) -> MultiLevelRepr:
    if isinstance(images, ObjectFeatureSet):
        images = [images]
    features, mask = pad_features(images)
    return encoder(features, mask)


def encode_text_levels(queries: TokenSequence | list[TokenSequence], encoder: TextEncoder) -> MultiLevelRepr:
    if isinstance(queries, TokenSequence):
        queries = [queries]
    ids, mask = pad_tokens(queries)
    return encoder(ids, mask)
