"""Relative transformer layer and overlapping patch embedding.

Token sequences are laid out as ``[class; meta_1..meta_k; vision_1..vision_M^2]``.
Vision-vision pairs read a learned bias indexed by their 2-d offset; every
pair involving a non-vision token reads one shared extra slot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import LayerNorm, Linear, MlpBlock, Module, Parameter, drop_path, trunc_normal
from .tensor import Tensor


@dataclass
class TokenSequence:
    tokens: Tensor  # [B, n_extra + m*m, D]
    m: int
    n_extra: int

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[1] != self.m * self.m + self.n_extra:
            raise ShapeError(
                f"token sequence {self.tokens.shape} does not hold {self.n_extra} extra + {self.m}x{self.m} vision tokens")

    @property
    def extra(self) -> Tensor:
        return self.tokens[:, :self.n_extra]

    @property
    def vision(self) -> Tensor:
        return self.tokens[:, self.n_extra:]


def bias_table_size(m: int) -> int:
    return (2 * m - 1) ** 2 + 1


def build_index_map(m: int, n_extra: int) -> np.ndarray:
    """Index into the bias table for every (query, key) pair.

    Vision pair offsets ``(dr, dc)`` map to ``(dr + m - 1) * (2m - 1) + (dc + m - 1)``;
    any pair touching one of the first ``n_extra`` tokens maps to ``(2m - 1)**2``.
    """
    if m < 1 or n_extra < 0:
        raise ConfigError(f"index map needs m >= 1 and n_extra >= 0, got m={m}, n_extra={n_extra}")
    side = 2 * m - 1
    rows, cols = np.divmod(np.arange(m * m), m)
    dr = rows[:, None] - rows[None, :] + m - 1
    dc = cols[:, None] - cols[None, :] + m - 1
    n = m * m + n_extra
    index = np.full((n, n), side * side, dtype=np.int64)
    index[n_extra:, n_extra:] = dr * side + dc
    return index


class RelativeBias(Module):
    """Per-head learned bias table of length ``(2M-1)^2 + 1`` plus its index map."""

    def __init__(self, m: int, n_extra: int, num_heads: int, rng: np.random.Generator):
        self.m, self.n_extra, self.num_heads = m, n_extra, num_heads
        self.table = Parameter(trunc_normal(rng, (num_heads, bias_table_size(m))))
        self.index_map = build_index_map(m, n_extra)

    def forward(self, seq_len: int) -> Tensor:
        if seq_len != self.index_map.shape[0]:
            raise ShapeError(f"sequence length {seq_len} does not match the bias index map {self.index_map.shape}")
        return T.getitem(self.table, (slice(None), self.index_map))


@dataclass
class AttentionSpec:
    dim: int
    head_dim: int = 32

    def __post_init__(self):
        if self.head_dim <= 0 or self.dim % self.head_dim:
            raise ConfigError(f"dim {self.dim} is not divisible by head_dim {self.head_dim}")

    @property
    def num_heads(self) -> int:
        return self.dim // self.head_dim


class Attention(Module):
    """Multi-head self-attention: ``softmax(QK^T / sqrt(d) + B) V``.

    Key-axis reductions are order-independent, so permuting tokens that share
    a bias slot permutes the output rows exactly.
    """

    def __init__(self, spec: AttentionSpec, rng: np.random.Generator):
        self.spec = spec
        self.qkv = Linear(spec.dim, 3 * spec.dim, rng)
        self.proj = Linear(spec.dim, spec.dim, rng)
        self.record = False
        self.last_attention: Optional[np.ndarray] = None

    def forward(self, x: Tensor, bias: Optional[Tensor] = None) -> Tensor:
        B, N, D = x.shape
        if D != self.spec.dim:
            raise ShapeError(f"attention expects dim {self.spec.dim}, got {x.shape}")
        H, dh = self.spec.num_heads, self.spec.head_dim
        qkv = T.transpose(T.reshape(self.qkv(x), (B, N, 3, H, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if bias is not None:
            if bias.shape != (H, N, N):
                raise ShapeError(f"bias {bias.shape} does not match {H} heads and {N} tokens")
            logits = T.add(logits, bias)
        attn = T.softmax(logits, axis=-1, ordered=True)
        if self.record:
            self.last_attention = attn.data.copy()
        out = T.ordered_matmul(attn, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, N, D))
        return self.proj(out)


class TransformerBlock(Module):
    """Pre-norm relative transformer block: MSA then MLP, both residual."""

    def __init__(self, spec: AttentionSpec, rng: np.random.Generator, mlp_ratio: int = 4,
                 drop_path_rate: float = 0.0):
        self.spec = spec
        self.norm1 = LayerNorm(spec.dim)
        self.attn = Attention(spec, rng)
        self.mlp = MlpBlock(spec.dim, rng, ratio=mlp_ratio, drop_path_rate=drop_path_rate)
        self.drop_path_rate = drop_path_rate

    def forward(self, x: Tensor, bias: Optional[Tensor] = None, rng: Optional[np.random.Generator] = None) -> Tensor:
        x = T.add(x, drop_path(self.attn(self.norm1(x), bias), self.drop_path_rate, self.training, rng))
        return self.mlp(x, rng)


class OverlapPatchEmbed(Module):
    """Stride-2 conv tokenizer with kernel 3 / padding 1, followed by layer norm."""

    def __init__(self, in_ch: int, out_dim: int, rng: np.random.Generator, kernel: int = 3, stride: int = 2):
        if kernel <= stride:
            raise ConfigError(f"overlapping patch embedding needs kernel > stride, got {kernel} <= {stride}")
        from .nn import Conv2d

        self.proj = Conv2d(in_ch, out_dim, kernel, rng, stride=stride, padding=kernel // 2)
        self.norm = LayerNorm(out_dim)
        self.out_dim = out_dim

    def forward(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        if H % 2 or W % 2:
            raise ShapeError(f"overlapping patch embedding needs even spatial dims, got {x.shape}")
        y = self.proj(x)
        y = T.transpose(T.reshape(y, (B, self.out_dim, -1)), (0, 2, 1))
        return self.norm(y)
