"""Object- and image-granularity similarity between encoded images and queries.

The pairwise functions score one (image, query) pair from unpadded
``(n, d_c)`` / ``(m, d_c)`` level features. ``batch_similarity_tables``
computes the same quantities for every image/query combination of a padded
batch at once; the two paths are written independently so either can check
the other.
"""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .encoders import MultiLevelRepr
from .layers import Linear, Module
from .numcore import Tensor

OBJECT = "object"
IMAGE = "image"
GRANULARITIES = (OBJECT, IMAGE)


class GranularityHead(Module):
    """Projections for one level.

    The object space and the image space use separate query projections.
    The attention MLP has one hidden layer of width ``max(1, d_c // 2)``.
    Query projections carry no bias: it would add the same amount to every
    entry of an image's row of similarities, which the row softmax of the
    matching loss cancels, so it could never be trained.
    """

    def __init__(self, d_c: int, d_e: int, rng: np.random.Generator):
        hidden = max(1, d_c // 2)
        self.obj_visual = Linear(d_c, d_e, rng)
        self.obj_query = Linear(d_c, d_e, rng, bias=False)
        self.att_hidden = Linear(d_c, hidden, rng)
        self.att_out = Linear(hidden, 1, rng)
        self.img_visual = Linear(d_c, d_e, rng)
        self.img_query = Linear(d_c, d_e, rng, bias=False)


def projection_similarity(v, q) -> Tensor:
    """Length of the projection of ``q`` onto the direction of ``v``."""
    v, q = nc.as_tensor(v), nc.as_tensor(q)
    norm = nc.l2norm(v, axis=-1, keepdims=False)
    if norm.item() == 0.0:
        raise ValueError("projection similarity undefined for a zero-norm visual vector")
    return nc.dot(v, q) / norm


def _pool_words(Q: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return Q.mean(axis=0)
    return nc.masked_mean(Q, np.asarray(mask, dtype=bool)[:, None], axis=0)


def _valid_rows(V: Tensor, mask: np.ndarray | None) -> list[int]:
    return list(range(V.shape[0])) if mask is None else [int(k) for k in np.flatnonzero(mask)]


def object_granularity_sim(V, Q, head: GranularityHead, v_mask=None, q_mask=None) -> Tensor:
    """Mean projection similarity between each projected object and the projected mean query."""
    V, Q = nc.as_tensor(V), nc.as_tensor(Q)
    q_bar = head.obj_query(_pool_words(Q, q_mask))
    rows = _valid_rows(V, v_mask)
    if not rows:
        raise ValueError("image has no unmasked objects")
    sims = [projection_similarity(head.obj_visual(V[k]), q_bar) for k in rows]
    return nc.stack(sims).mean()


def attention_pool(V, head: GranularityHead, mask=None) -> tuple[Tensor, Tensor]:
    """Attention-weighted sum of object features; returns ``(pooled, weights)``."""
    V = nc.as_tensor(V)
    n = V.shape[0]
    scores = head.att_out(nc.relu(head.att_hidden(V))).reshape(n)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("attention pooling over an all-masked object set")
    weights = nc.softmax(scores, axis=0, mask=mask)
    pooled = (weights.reshape(n, 1) * V).sum(axis=0)
    return pooled, weights


def image_granularity_sim(V, Q, head: GranularityHead, v_mask=None, q_mask=None) -> Tensor:
    V, Q = nc.as_tensor(V), nc.as_tensor(Q)
    pooled, _ = attention_pool(V, head, v_mask)
    return projection_similarity(head.img_visual(pooled), head.img_query(_pool_words(Q, q_mask)))


# ---------------------------------------------------------------------------
# batched tables


def _unit_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    norms = nc.l2norm(x, axis=-1, keepdims=True)
    valid = np.ones(norms.shape, dtype=bool) if mask is None else mask[..., None]
    if np.any(norms.data[valid] == 0.0):
        raise ValueError("projection similarity undefined for a zero-norm visual vector")
    return x / nc.where(valid, norms, 1.0)


def pooled_queries(Q: Tensor, q_mask: np.ndarray) -> Tensor:
    return nc.masked_mean(Q, q_mask[:, :, None], axis=1)


def object_table(V: Tensor, v_mask: np.ndarray, q_pooled: Tensor, head: GranularityHead) -> Tensor:
    """``(N_img, N_query)`` object-granularity similarities."""
    units = _unit_rows(head.obj_visual(V), v_mask)
    q_bar = head.obj_query(q_pooled)
    per_object = units @ q_bar.swapaxes(0, 1)
    return nc.masked_mean(per_object, v_mask[:, :, None], axis=1)


def attention_weights(V: Tensor, v_mask: np.ndarray, head: GranularityHead) -> Tensor:
    B, n, _ = V.shape
    scores = head.att_out(nc.relu(head.att_hidden(V))).reshape(B, n)
    return nc.softmax(scores, axis=-1, mask=v_mask)


def image_table(V: Tensor, v_mask: np.ndarray, q_pooled: Tensor, head: GranularityHead) -> Tensor:
    """``(N_img, N_query)`` image-granularity similarities."""
    B, n, _ = V.shape
    weights = attention_weights(V, v_mask, head)
    pooled = (weights.reshape(B, n, 1) * V).sum(axis=1)
    units = _unit_rows(head.img_visual(pooled))
    q_bar = head.img_query(q_pooled)
    return units @ q_bar.swapaxes(0, 1)


def batch_similarity_tables(
    images: MultiLevelRepr,
    queries: MultiLevelRepr,
    heads: list[GranularityHead],
    levels=None,
    granularities=GRANULARITIES,
) -> dict[tuple[int, str], Tensor]:
    """All-pairs similarity tables keyed by ``(level, granularity)``; rows index images."""
    if len(images) != len(queries) or len(heads) != len(images):
        raise ValueError("images, queries and heads must cover the same number of levels")
    levels = range(1, len(heads) + 1) if levels is None else levels
    tables = {}
    for l in levels:
        V, Q, head = images.level(l), queries.level(l), heads[l - 1]
        q_pooled = pooled_queries(Q, queries.mask)
        if OBJECT in granularities:
            tables[(l, OBJECT)] = object_table(V, images.mask, q_pooled, head)
        if IMAGE in granularities:
            tables[(l, IMAGE)] = image_table(V, images.mask, q_pooled, head)
    return tables
