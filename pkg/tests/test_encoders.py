import math

import numpy as np
import pytest

from hslnet import numcore as nc
from hslnet.data import ObjectFeatureSet, TokenSequence
from hslnet.encoders import (
    BiGRULevel, ImageEncoder, TextEncoder, TransformerBlock, encode_image_levels, encode_text_levels,
    project_input, sinusoidal_positions,
)
from hslnet.layers import Linear
from hslnet.numcore import Tensor

from conftest import tiny_config


def randomize(module, rng, scale=0.5):
    for p in module.parameters().values():
        p.data = rng.standard_normal(p.shape) * scale


class TestProjectInput:
    def test_identity(self, rng):
        layer = Linear(4, 4, rng)
        layer.weight.data = np.eye(4)
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(project_input(x, layer).data, x)

    def test_zero_input_gives_bias(self, rng):
        layer = Linear(4, 8, rng)
        layer.bias.data = rng.standard_normal(8)
        out = project_input(np.zeros((3, 4)), layer).data
        for row in out:
            np.testing.assert_array_equal(row, layer.bias.data)

    def test_matches_matmul_oracle(self, rng):
        layer = Linear(4, 8, rng)
        layer.bias.data = rng.standard_normal(8)
        x = rng.standard_normal((3, 4))
        expected = np.array([[math.fsum(x[i, k] * layer.weight.data[k, j] for k in range(4)) + layer.bias.data[j]
                              for j in range(8)] for i in range(3)])
        np.testing.assert_allclose(project_input(x, layer).data, expected, rtol=1e-13, atol=1e-14)


def block_oracle(x, blk, heads):
    """One post-norm sublayer evaluated step by step with plain numpy loops."""
    att = blk.attention
    n, d = x.shape
    dh = d // heads

    def lin(v, layer):
        return v @ layer.weight.data + (layer.bias.data if layer.bias is not None else 0.0)

    def norm(v, ln):
        mu = v.mean(axis=-1, keepdims=True)
        var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
        return (v - mu) / np.sqrt(var + ln.eps) * ln.gamma.data + ln.beta.data

    q, k, v = lin(x, att.query), lin(x, att.key), lin(x, att.value)
    mixed = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            s = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in range(n)])
            w = np.exp(s - s.max())
            w /= w.sum()
            mixed[i, sl] = sum(w[j] * v[j, sl] for j in range(n))
    y = norm(x + lin(mixed, att.out), blk.norm1)
    hidden = np.maximum(lin(y, blk.ff_in), 0.0)
    return norm(y + lin(hidden, blk.ff_out), blk.norm2)


def gru_oracle(x, direction, reverse):
    w_in, b_in = direction.w_in.data, direction.b_in.data
    w_hid, b_hid = direction.w_hid.data, direction.b_hid.data
    H = direction.hidden
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))
    h = np.zeros(H)
    out = [None] * len(x)
    steps = range(len(x) - 1, -1, -1) if reverse else range(len(x))
    for t in steps:
        gi = x[t] @ w_in + b_in
        gh = h @ w_hid + b_hid
        r = sig(gi[:H] + gh[:H])
        z = sig(gi[H:2 * H] + gh[H:2 * H])
        c = np.tanh(gi[2 * H:] + r * gh[2 * H:])
        h = (1 - z) * c + z * h
        out[t] = h
    return np.array(out)


class TestTransformer:
    def test_single_sublayer_matches_hand_oracle(self, rng):
        blk = TransformerBlock(4, 2, rng)
        randomize(blk, rng)
        x = rng.standard_normal((2, 4))
        out = blk(Tensor(x[None]), np.ones((1, 2), dtype=bool)).data[0]
        np.testing.assert_allclose(out, block_oracle(x, blk, 2), rtol=1e-12, atol=1e-12)

    def test_single_object_attends_to_itself(self, rng):
        enc = ImageEncoder(tiny_config(), rng)
        enc(rng.standard_normal((1, 1, 6)), np.ones((1, 1), dtype=bool))
        for level in enc.levels:
            np.testing.assert_array_equal(level.blocks[-1].attention.last_weights, np.ones((1, 2, 1, 1)))

    def test_padding_does_not_leak(self, rng):
        enc = ImageEncoder(tiny_config(), rng)
        a = ObjectFeatureSet("a", rng.standard_normal((2, 6)))
        b = ObjectFeatureSet("b", rng.standard_normal((4, 6)))
        batched = encode_image_levels([a, b], enc)
        alone = encode_image_levels(a, enc)
        for l in (1, 2):
            np.testing.assert_allclose(batched.level(l).data[0, :2], alone.level(l).data[0], rtol=1e-12, atol=1e-13)


class TestShapes:
    @pytest.mark.parametrize("kind", ["transformer", "bigru"])
    def test_every_level_has_width_dc(self, kind, rng):
        cfg = tiny_config(kind)
        img = encode_image_levels(ObjectFeatureSet("a", rng.standard_normal((3, 6))), ImageEncoder(cfg, rng))
        txt = encode_text_levels(TokenSequence("q", [2, 3, 4, 5, 6]), TextEncoder(cfg, rng))
        assert len(img) == len(txt) == cfg.levels
        for l in range(1, cfg.levels + 1):
            assert img.level(l).shape == (1, 3, cfg.d_c)
            assert txt.level(l).shape == (1, 5, cfg.d_c)

    def test_limits(self, rng):
        cfg = tiny_config(max_objects=2, max_tokens=3)
        with pytest.raises(ValueError, match="max_objects"):
            encode_image_levels(ObjectFeatureSet("a", np.ones((3, 6))), ImageEncoder(cfg, rng))
        with pytest.raises(ValueError, match="max_tokens"):
            encode_text_levels(TokenSequence("q", [2, 3, 4, 5]), TextEncoder(cfg, rng))
        with pytest.raises(ValueError, match="out of range"):
            encode_text_levels(TokenSequence("q", [2, 99]), TextEncoder(cfg, rng))


class TestBiGRU:
    @pytest.mark.parametrize("m", [1, 2, 3])
    def test_matches_unrolled_recurrence(self, m, rng):
        level = BiGRULevel(6, rng)
        randomize(level, rng)
        x = rng.standard_normal((m, 6))
        out = level(Tensor(x[None]), np.ones((1, m), dtype=bool)).data[0]
        expected = np.concatenate([gru_oracle(x, level.forward_gru, False),
                                   gru_oracle(x, level.backward_gru, True)], axis=1)
        np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-13)

    def test_single_step_both_directions_agree_in_input(self, rng):
        level = BiGRULevel(6, rng)
        level.backward_gru.w_in.data = level.forward_gru.w_in.data
        level.backward_gru.w_hid.data = level.forward_gru.w_hid.data
        out = level(Tensor(rng.standard_normal((1, 1, 6))), np.ones((1, 1), dtype=bool)).data[0, 0]
        assert out.shape == (2 * 3,)
        np.testing.assert_array_equal(out[:3], out[3:])

    def test_padding_carries_state(self, rng):
        level = BiGRULevel(6, rng)
        randomize(level, rng)
        x = rng.standard_normal((1, 4, 6))
        mask = np.array([[True, True, False, False]])
        padded = level(Tensor(x), mask).data[0]
        short = level(Tensor(x[:, :2]), np.ones((1, 2), dtype=bool)).data[0]
        np.testing.assert_allclose(padded[:2], short, rtol=1e-13)


class TestOrderSensitivity:
    def test_token_order_changes_transformer_text(self, rng):
        enc = TextEncoder(tiny_config(), rng)
        a = encode_text_levels(TokenSequence("q", [2, 3, 4]), enc).level(2).data[0]
        b = encode_text_levels(TokenSequence("q", [4, 3, 2]), enc).level(2).data[0]
        assert not np.allclose(a[::-1], b)
        assert not np.allclose(a.mean(axis=0), b.mean(axis=0))

    def test_object_order_is_equivariant(self, rng):
        enc = ImageEncoder(tiny_config(), rng)
        feats = rng.standard_normal((4, 6))
        perm = np.array([2, 0, 3, 1])
        a = encode_image_levels(ObjectFeatureSet("a", feats), enc)
        b = encode_image_levels(ObjectFeatureSet("b", feats[perm]), enc)
        for l in (1, 2):
            np.testing.assert_allclose(a.level(l).data[0][perm], b.level(l).data[0], rtol=1e-12, atol=1e-13)
            np.testing.assert_allclose(a.level(l).data[0].mean(axis=0), b.level(l).data[0].mean(axis=0), atol=1e-12)

    def test_positions_are_distinct(self):
        pe = sinusoidal_positions(5, 8)
        assert pe.shape == (5, 8)
        np.testing.assert_array_equal(pe[0, 0::2], 0.0)
        np.testing.assert_array_equal(pe[0, 1::2], 1.0)
        assert len({tuple(r) for r in pe.round(12)}) == 5
