import math

import numpy as np
import pytest

from metaformer import tensor as T
from metaformer.attention import (Attention, AttentionSpec, OverlapPatchEmbed, RelativeBias, TokenSequence,
                                  TransformerBlock, bias_table_size, build_index_map)
from metaformer.errors import ConfigError, ShapeError
from metaformer.tensor import Tensor


def brute_force_index(m, n_extra):
    """Enumerate every (query, key) pair directly from grid coordinates."""
    n = m * m + n_extra
    shared = (2 * m - 1) ** 2
    out = np.full((n, n), shared)
    offsets = {}
    for dr in range(-(m - 1), m):
        for dc in range(-(m - 1), m):
            offsets[(dr, dc)] = len(offsets)
    for i in range(m * m):
        for j in range(m * m):
            out[n_extra + i, n_extra + j] = offsets[(i // m - j // m, i % m - j % m)]
    return out


def test_index_map_m1():
    idx = build_index_map(1, 1)
    assert idx.tolist() == [[1, 1], [1, 0]]
    assert bias_table_size(1) == 2


def test_table_sizes():
    assert bias_table_size(2) == 10
    for m in (1, 2, 3, 7, 14):
        assert bias_table_size(m) == (2 * m - 1) ** 2 + 1


@pytest.mark.parametrize("m,n_extra", [(3, 1), (3, 4), (2, 2), (4, 1)])
def test_index_map_brute_force(m, n_extra):
    assert np.array_equal(build_index_map(m, n_extra), brute_force_index(m, n_extra))


def test_translation_property():
    m, n_extra = 4, 2
    idx = build_index_map(m, n_extra)
    # pairs (0,0)->(1,1) and (2,2)->(3,3) share (drow, dcol) = (-1, -1)
    a = idx[n_extra + 0 * m + 0, n_extra + 1 * m + 1]
    b = idx[n_extra + 2 * m + 2, n_extra + 3 * m + 3]
    assert a == b


def test_relative_bias_gather(rng):
    rb = RelativeBias(2, 1, 3, rng)
    assert rb.table.shape == (3, 10)
    B = rb(5).data
    assert B.shape == (3, 5, 5)
    np.testing.assert_array_equal(B[:, 0, :], np.repeat(rb.table.data[:, -1:], 5, axis=1))
    with pytest.raises(ShapeError):
        rb(6)


def test_attention_spec():
    assert AttentionSpec(384, 32).num_heads == 12
    assert AttentionSpec(384, 8).num_heads == 48
    with pytest.raises(ConfigError):
        AttentionSpec(100, 32)


def test_single_token_attention_is_value_projection(rng):
    attn = Attention(AttentionSpec(8, 4), rng)
    x = rng.standard_normal((2, 1, 8))
    v = (x @ attn.qkv.weight.data.T + attn.qkv.bias.data)[..., 16:]
    ref = v @ attn.proj.weight.data.T + attn.proj.bias.data
    np.testing.assert_allclose(attn(Tensor(x)).data, ref, rtol=1e-12)


def test_zero_bias_matches_direct_attention(rng):
    spec = AttentionSpec(8, 4)
    attn = Attention(spec, rng)
    rb = RelativeBias(1, 1, spec.num_heads, rng)
    rb.table.data[...] = 0.0
    x = rng.standard_normal((1, 2, 8))
    qkv = x[0] @ attn.qkv.weight.data.T + attn.qkv.bias.data
    heads = []
    for h in range(2):
        q = qkv[:, h * 4:(h + 1) * 4]
        k = qkv[:, 8 + h * 4:8 + (h + 1) * 4]
        v = qkv[:, 16 + h * 4:16 + (h + 1) * 4]
        rows = []
        for i in range(2):
            s = [math.exp(float(q[i] @ k[j]) / 2.0) for j in range(2)]
            rows.append((s[0] * v[0] + s[1] * v[1]) / (s[0] + s[1]))
        heads.append(np.stack(rows))
    ref = np.concatenate(heads, axis=1) @ attn.proj.weight.data.T + attn.proj.bias.data
    np.testing.assert_allclose(attn(Tensor(x), rb(2)).data[0], ref, rtol=1e-12, atol=1e-14)


def test_attention_rows_are_distributions(rng):
    attn = Attention(AttentionSpec(8, 4), rng)
    attn.record = True
    rb = RelativeBias(2, 2, 2, rng)
    attn(Tensor(rng.standard_normal((3, 6, 8))), rb(6))
    p = attn.last_attention
    assert np.all(p >= 0) and np.allclose(p.sum(-1), 1.0, atol=1e-9)


@pytest.mark.parametrize("block", [False, True])
def test_meta_permutation_equivariance_bit_exact(rng, block):
    spec = AttentionSpec(8, 4)
    n_meta, m = 4, 2
    n_extra = 1 + n_meta
    layer = TransformerBlock(spec, rng) if block else Attention(spec, rng)
    rb = RelativeBias(m, n_extra, spec.num_heads, rng)
    x = rng.standard_normal((2, n_extra + m * m, 8))
    perm = np.concatenate([[0], 1 + rng.permutation(n_meta), np.arange(n_extra, n_extra + m * m)])
    out = layer(Tensor(x), rb(x.shape[1])).data
    out_p = layer(Tensor(x[:, perm]), rb(x.shape[1])).data
    assert np.array_equal(out_p, out[:, perm])


def test_transformer_block_zero_projections_identity(rng):
    blk = TransformerBlock(AttentionSpec(8, 4), rng)
    for p in (blk.attn.proj.weight, blk.attn.proj.bias, blk.mlp.mlp.fc2.weight, blk.mlp.mlp.fc2.bias):
        p.data[...] = 0
    x = rng.standard_normal((2, 5, 8))
    assert np.array_equal(blk(Tensor(x)).data, x)


def test_attention_shape_errors(rng):
    attn = Attention(AttentionSpec(8, 4), rng)
    with pytest.raises(ShapeError):
        attn(Tensor(np.zeros((1, 3, 6))))
    with pytest.raises(ShapeError):
        attn(Tensor(np.zeros((1, 3, 8))), RelativeBias(2, 1, 2, rng)(5))


def test_overlap_patch_embed(rng):
    pe = OverlapPatchEmbed(3, 6, rng)
    assert pe(Tensor(rng.standard_normal((2, 3, 8, 8)))).shape == (2, 16, 6)
    with pytest.raises(ShapeError):
        pe(Tensor(np.zeros((1, 3, 7, 8))))


def test_overlap_property(rng):
    pe = OverlapPatchEmbed(1, 4, rng)
    x = rng.standard_normal((1, 1, 8, 8))
    base = pe(Tensor(x)).data
    x2 = x.copy()
    x2[0, 0, 3, 3] += 1.0  # odd pixel lies in the overlap of 2x2 windows
    changed = np.any(np.abs(pe(Tensor(x2)).data - base) > 0, axis=-1)[0]
    assert changed.sum() == 4


def test_token_sequence_validation():
    TokenSequence(Tensor(np.zeros((1, 6, 4))), m=2, n_extra=2)
    with pytest.raises(ShapeError):
        TokenSequence(Tensor(np.zeros((1, 6, 4))), m=2, n_extra=1)
