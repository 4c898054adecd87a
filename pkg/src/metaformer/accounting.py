"""Closed-form parameter and FLOP counts.

FLOPs follow the multiply-accumulate x 2 convention: a ``k``-term dot
product costs ``2k``.  Counted: convolutions, linear layers, attention
logits (QK^T) and attention-weighted values.  Normalisation, activations,
softmax, pooling and residual additions are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

from .attention import bias_table_size
from .meta import MetaSchema
from .model import ModelConfig


def _linear(i: int, o: int, bias: bool = True) -> int:
    return i * o + (o if bias else 0)


def _conv(cin: int, cout: int, k: int, groups: int = 1, bias: bool = True) -> int:
    return cout * (cin // groups) * k * k + (cout if bias else 0)


def _ln(d: int) -> int:
    return 2 * d


def _stem_plan(dim: int, layers: int) -> List[int]:
    return [max(1, dim // 2)] * (layers - 1) + [dim]


def _mbconv_params(cin: int, cout: int) -> int:
    h = 4 * cin
    se = max(1, int(cin * 0.25))
    return (_conv(cin, h, 1, bias=False) + _ln(h)
            + _conv(h, h, 3, groups=h, bias=False) + _ln(h)
            + _conv(h, se, 1) + _conv(se, h, 1)
            + _conv(h, cout, 1, bias=False) + _ln(cout))


def _block_params(d: int, mlp_ratio: int) -> int:
    return _ln(d) + _linear(d, 3 * d) + _linear(d, d) + _ln(d) + _linear(d, mlp_ratio * d) + _linear(mlp_ratio * d, d)


def _meta_params(schema: MetaSchema, d3: int) -> int:
    total = len(schema.channels) * d3  # null tokens
    for ch in schema.channels:
        total += _linear(ch.feature_dim, 4 * d3) + _linear(4 * d3, d3)
        if ch.kind == "text":
            total += (ch.vocab + 1) * ch.word_dim
    return total


def param_breakdown(config: ModelConfig, image_size: Optional[int] = None) -> Dict[str, int]:
    """Learnable scalars per component, for the model built at ``image_size``."""
    c = config
    size = image_size or c.image_size
    d0, d1, d2, d3, d4 = c.dims
    l0, l1, l2, l3, l4 = c.depths
    m3, m4 = size // 16, size // 32
    heads3, heads4 = d3 // c.head_dim, d4 // c.head_dim
    out = {}
    stem = [c.in_channels] + _stem_plan(d0, l0)
    out["stem"] = sum(_conv(a, b, 3, bias=False) + _ln(b) for a, b in zip(stem, stem[1:]))
    out["stage1"] = sum(_mbconv_params(d0 if i == 0 else d1, d1) for i in range(l1))
    out["stage2"] = sum(_mbconv_params(d1 if i == 0 else d2, d2) for i in range(l2))
    out["embed3"] = _conv(d2, d3, 3) + _ln(d3)
    out["stage3"] = l3 * _block_params(d3, c.mlp_ratio)
    out["bias3"] = heads3 * bias_table_size(m3)
    out["embed4"] = _conv(d3, d4, 3) + _ln(d4)
    out["stage4"] = l4 * _block_params(d4, c.mlp_ratio)
    out["bias4"] = heads4 * bias_table_size(m4)
    tokens = 0
    if c.has_class_token:
        tokens += d3
    if c.class_token_mode == "parallel":
        tokens += d4
    out["class_tokens"] = tokens
    lifted = c.meta.num_tokens + int(c.class_token_mode == "serial")
    out["extra_lift"] = _linear(d3, d4) if lifted else 0
    out["meta"] = _meta_params(c.meta, d3) if c.meta else 0
    if c.class_token_mode == "parallel":
        h = c.agg_hidden
        fuse = 2 * d4 * d4 if c.aggregate_fusion == "dense" else 2 * d4
        out["aggregate"] = _ln(d3) + _linear(d3, h) + _linear(h, d4) + fuse + d4 + _ln(d4)
    else:
        out["final_norm"] = _ln(d4)
    out["head"] = _linear(d4, c.num_classes)
    return out


def count_params(config: ModelConfig, image_size: Optional[int] = None) -> int:
    return sum(param_breakdown(config, image_size).values())


def conv_flops(h_out: int, w_out: int, cin: int, cout: int, k: int, groups: int = 1) -> int:
    return 2 * h_out * w_out * (cin // groups) * k * k * cout


def linear_flops(tokens: int, i: int, o: int) -> int:
    return 2 * tokens * i * o


def _mbconv_flops(cin: int, cout: int, h_in: int, stride: int) -> int:
    h = 4 * cin
    se = max(1, int(cin * 0.25))
    h_out = h_in // stride
    return (conv_flops(h_in, h_in, cin, h, 1)
            + conv_flops(h_out, h_out, h, h, 3, groups=h)
            + 2 * (h * se + se * h)
            + conv_flops(h_out, h_out, h, cout, 1))


def _block_flops(tokens: int, d: int, mlp_ratio: int) -> int:
    return (linear_flops(tokens, d, 3 * d) + 2 * 2 * tokens * tokens * d
            + linear_flops(tokens, d, d) + 2 * linear_flops(tokens, d, mlp_ratio * d))


def flop_breakdown(config: ModelConfig, image_size: Optional[int] = None) -> Dict[str, int]:
    c = config
    size = image_size or c.image_size
    d0, d1, d2, d3, d4 = c.dims
    l0, l1, l2, l3, l4 = c.depths
    s0, s1, s2, s3, s4 = (size // 2 ** (i + 1) for i in range(5))
    n = c.n_extra
    out = {}
    stem = [c.in_channels] + _stem_plan(d0, l0)
    out["stem"] = sum(conv_flops(s0, s0, a, b, 3) for a, b in zip(stem, stem[1:]))
    out["stage1"] = sum(_mbconv_flops(d0 if i == 0 else d1, d1, s0 if i == 0 else s1, 2 if i == 0 else 1)
                        for i in range(l1))
    out["stage2"] = sum(_mbconv_flops(d1 if i == 0 else d2, d2, s2, 1) for i in range(l2))
    out["embed3"] = conv_flops(s3, s3, d2, d3, 3)
    out["stage3"] = l3 * _block_flops(s3 * s3 + n, d3, c.mlp_ratio)
    out["embed4"] = conv_flops(s4, s4, d3, d4, 3)
    lifted = c.meta.num_tokens + int(c.class_token_mode == "serial")
    out["extra_lift"] = linear_flops(lifted, d3, d4)
    out["stage4"] = l4 * _block_flops(s4 * s4 + n, d4, c.mlp_ratio)
    if c.meta:
        meta = 0
        for ch in c.meta.channels:
            meta += ch.num_tokens * (linear_flops(1, ch.feature_dim, 4 * d3) + linear_flops(1, 4 * d3, d3))
        out["meta"] = meta
    if c.class_token_mode == "parallel":
        fuse = linear_flops(1, 2 * d4, d4) if c.aggregate_fusion == "dense" else 2 * 2 * d4
        out["aggregate"] = linear_flops(1, d3, c.agg_hidden) + linear_flops(1, c.agg_hidden, d4) + fuse
    out["head"] = linear_flops(1, d4, c.num_classes)
    return out


def count_flops(config: ModelConfig, image_size: Optional[int] = None) -> int:
    """FLOPs (2 x MACs) of one forward pass on a single image."""
    return sum(flop_breakdown(config, image_size).values())


def count_macs(config: ModelConfig, image_size: Optional[int] = None) -> int:
    return count_flops(config, image_size) // 2


@dataclass
class CountRow:
    name: str
    image_size: int
    params: int
    flops: int

    @property
    def macs(self) -> int:
        return self.flops // 2


def count_table(config: ModelConfig, sizes=(224, 384)) -> List[CountRow]:
    return [CountRow(config.name, s, count_params(config, s), count_flops(config, s)) for s in sizes]
