"""MetaFormer backbone: conv stages S0-S2, relative transformer stages S3-S4.

Stage layout (each stage halves the spatial size once)::

    S0  conv stem (first conv stride 2)
    S1  MBConv, first block stride 2
    S2  2x2 max-pool, then MBConv
    S3  overlapping patch embedding + transformer blocks  [class; meta; vision]
    S4  overlapping patch embedding + transformer blocks

Extra tokens (class, meta) bypass the S3->S4 spatial downsample and are
lifted to the S4 width by a shared linear map.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .attention import AttentionSpec, OverlapPatchEmbed, RelativeBias, TransformerBlock
from .errors import ConfigError, ContractError, ShapeError
from .meta import MetaBatch, MetaEmbedding, MetaSchema
from .nn import (ConvStem, LayerNorm, Linear, MaxPoolDown, MBConv, MBConvSpec, Mlp, Module, Parameter,
                 drop_path_rates, trunc_normal)
from .tensor import Tensor

STAGE_KINDS = ("conv-stem", "mbconv", "mbconv", "transformer", "transformer")
CLASS_TOKEN_MODES = ("gap", "serial", "parallel")
FUSION_KINDS = ("depthwise", "dense")


@dataclass(frozen=True)
class StageConfig:
    kind: str
    layers: int
    dim: int

    def __post_init__(self):
        if self.layers < 1 or self.dim < 1:
            raise ConfigError(f"stage needs L >= 1 and D >= 1, got L={self.layers} D={self.dim}")


@dataclass(frozen=True)
class ModelConfig:
    stages: Tuple[StageConfig, ...]
    num_classes: int = 1000
    image_size: int = 224
    in_channels: int = 3
    class_token_mode: str = "parallel"
    head_dim: int = 32
    mlp_ratio: int = 4
    max_drop_path: float = 0.0
    aggregate_hidden: Optional[int] = None  # defaults to the S3 width
    aggregate_fusion: str = "depthwise"
    meta: MetaSchema = field(default_factory=MetaSchema)
    name: str = "custom"

    def __post_init__(self):
        if len(self.stages) != 5:
            raise ConfigError(f"expected 5 stages, got {len(self.stages)}")
        for i, (st, kind) in enumerate(zip(self.stages, STAGE_KINDS)):
            if st.kind != kind:
                raise ConfigError(f"stage S{i} must be {kind!r}, got {st.kind!r}")
        if self.class_token_mode not in CLASS_TOKEN_MODES:
            raise ConfigError(f"class_token_mode must be one of {CLASS_TOKEN_MODES}, got {self.class_token_mode!r}")
        if self.image_size < 32 or self.image_size % 32:
            raise ConfigError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if not 0.0 <= self.max_drop_path < 1.0:
            raise ConfigError(f"max_drop_path must be in [0, 1), got {self.max_drop_path}")
        if self.aggregate_fusion not in FUSION_KINDS:
            raise ConfigError(f"aggregate_fusion must be one of {FUSION_KINDS}, got {self.aggregate_fusion!r}")
        for st in self.stages[3:]:
            AttentionSpec(st.dim, self.head_dim)

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(s.dim for s in self.stages)

    @property
    def depths(self) -> Tuple[int, ...]:
        return tuple(s.layers for s in self.stages)

    def grid(self, stage: int, image_size: Optional[int] = None) -> int:
        """Spatial side length at the output of stage ``stage``."""
        return (image_size or self.image_size) // 2 ** (stage + 1)

    @property
    def has_class_token(self) -> bool:
        return self.class_token_mode != "gap"

    @property
    def n_extra(self) -> int:
        """Extra (non-vision) tokens in S3/S4: class token plus meta tokens."""
        return int(self.has_class_token) + self.meta.num_tokens

    @property
    def agg_hidden(self) -> int:
        return self.aggregate_hidden or self.stages[3].dim

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        d["meta"] = self.meta.to_dicts()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stages"] = tuple(StageConfig(**s) for s in d["stages"])
        d["meta"] = MetaSchema.from_dicts(d.get("meta", []))
        return cls(**d)

    def hash(self) -> str:
        """SHA-256 of the canonical JSON form (hex)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _stages(*pairs) -> Tuple[StageConfig, ...]:
    return tuple(StageConfig(kind, l, d) for kind, (l, d) in zip(STAGE_KINDS, pairs))


PRESETS: Dict[str, ModelConfig] = {
    "metaformer-0": ModelConfig(_stages((3, 64), (2, 96), (3, 192), (5, 384), (2, 768)),
                                max_drop_path=0.1, name="metaformer-0"),
    "metaformer-1": ModelConfig(_stages((3, 64), (2, 96), (6, 192), (14, 384), (2, 768)),
                                max_drop_path=0.2, name="metaformer-1"),
    "metaformer-2": ModelConfig(_stages((3, 128), (2, 128), (6, 256), (14, 512), (2, 1024)),
                                max_drop_path=0.3, name="metaformer-2"),
    # desk-scale configuration for tests and synthetic training
    "tiny": ModelConfig(_stages((2, 16), (1, 24), (1, 32), (2, 64), (1, 128)),
                        num_classes=10, image_size=64, name="tiny"),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}") from None
    return cfg.with_(**overrides) if overrides else cfg


class AggregateLayer(Module):
    """Fuse the S3 and S4 class tokens.

    ``z1' = MLP(LN(z1))`` lifts to the S4 width, the length-2 sequence
    ``[z1', z2]`` is fused by a kernel-2 1-d convolution (no padding, D4
    channels) into one vector, and a final LN gives ``y``.  The convolution is
    depthwise by default; ``fusion="dense"`` mixes channels as well.
    """

    def __init__(self, d3: int, d4: int, hidden: int, rng: np.random.Generator, fusion: str = "depthwise"):
        self.d3, self.d4, self.fusion = d3, d4, fusion
        self.norm1 = LayerNorm(d3)
        self.mlp = Mlp(d3, hidden, rng, out_dim=d4)
        if fusion == "dense":
            self.fuse_weight = Parameter(trunc_normal(rng, (d4, d4, 2)))  # [out, in, kernel]
        else:
            self.fuse_weight = Parameter(trunc_normal(rng, (d4, 1, 2), std=0.5))
        self.fuse_bias = Parameter(np.zeros(d4, dtype=T.get_default_dtype()))
        self.norm = LayerNorm(d4)

    def forward(self, z1: Tensor, z2: Tensor) -> Tensor:
        if z1.shape[-1] != self.d3 or z2.shape[-1] != self.d4 or z1.shape[0] != z2.shape[0]:
            raise ShapeError(f"aggregate expects [B, {self.d3}] and [B, {self.d4}], got {z1.shape} and {z2.shape}")
        zh = self.mlp(self.norm1(z1))
        pair = T.stack([zh, z2], axis=-1)  # [B, D4, 2]
        if self.fusion == "dense":
            flat = T.reshape(pair, (pair.shape[0], 2 * self.d4))
            w = T.reshape(self.fuse_weight, (self.d4, 2 * self.d4))
            z = T.linear(flat, w, self.fuse_bias)
        else:
            w = T.reshape(self.fuse_weight, (self.d4, 2))
            z = T.add(T.tsum(T.mul(pair, w), axis=-1), self.fuse_bias)
        return self.norm(z)


@dataclass
class ForwardState:
    """Intermediate results exposed for analysis (similarity reports, tests)."""

    logits: Tensor
    s3_tokens: Tensor
    s4_tokens: Tensor
    n_extra: int
    z1: Optional[Tensor] = None
    z2: Optional[Tensor] = None


class MetaFormer(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        d0, d1, d2, d3, d4 = c.dims
        l0, l1, l2, l3, l4 = c.depths
        rates = iter(drop_path_rates(l1 + l2 + l3 + l4, c.max_drop_path))

        self.stem = ConvStem(c.in_channels, d0, l0, rng)
        self.stage1 = [MBConv(MBConvSpec(d0 if i == 0 else d1, d1, stride=2 if i == 0 else 1,
                                         drop_path_rate=next(rates)), rng) for i in range(l1)]
        self.pool2 = MaxPoolDown()
        self.stage2 = [MBConv(MBConvSpec(d1 if i == 0 else d2, d2, drop_path_rate=next(rates)), rng)
                       for i in range(l2)]

        n_extra = c.n_extra
        m3, m4 = c.grid(3), c.grid(4)
        self.embed3 = OverlapPatchEmbed(d2, d3, rng)
        self.meta_embed = MetaEmbedding(c.meta, d3, rng) if c.meta else None
        self.cls_token3 = Parameter(trunc_normal(rng, (1, 1, d3))) if c.has_class_token else None
        spec3 = AttentionSpec(d3, c.head_dim)
        self.bias3 = RelativeBias(m3, n_extra, spec3.num_heads, rng)
        self.stage3 = [TransformerBlock(spec3, rng, c.mlp_ratio, next(rates)) for _ in range(l3)]

        self.embed4 = OverlapPatchEmbed(d3, d4, rng)
        n_lifted = c.meta.num_tokens + int(c.class_token_mode == "serial")
        self.extra_lift = Linear(d3, d4, rng) if n_lifted else None
        self.cls_token4 = Parameter(trunc_normal(rng, (1, 1, d4))) if c.class_token_mode == "parallel" else None
        spec4 = AttentionSpec(d4, c.head_dim)
        self.bias4 = RelativeBias(m4, n_extra, spec4.num_heads, rng)
        self.stage4 = [TransformerBlock(spec4, rng, c.mlp_ratio, next(rates)) for _ in range(l4)]

        if c.class_token_mode == "parallel":
            self.aggregate = AggregateLayer(d3, d4, c.agg_hidden, rng, c.aggregate_fusion)
            self.final_norm = None
        else:
            self.aggregate = None
            self.final_norm = LayerNorm(d4)
        self.head = Linear(d4, c.num_classes, rng)

    # -- pieces ---------------------------------------------------------------
    def conv_features(self, images, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Stages S0-S2: ``[B, C, H, W]`` -> ``[B, D2, H/8, W/8]``."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=T.get_default_dtype()))
        c = self.config
        if x.ndim != 4 or x.shape[1] != c.in_channels or x.shape[2] != c.image_size or x.shape[3] != c.image_size:
            raise ShapeError(f"expected images [B, {c.in_channels}, {c.image_size}, {c.image_size}], got {x.shape}")
        x = self.stem(x)
        for blk in self.stage1:
            x = blk(x, rng)
        x = self.pool2(x)
        for blk in self.stage2:
            x = blk(x, rng)
        return x

    def meta_tokens(self, batch_size: int, meta: Optional[MetaBatch], mask: Optional[np.ndarray]) -> Optional[Tensor]:
        if self.meta_embed is None:
            if meta is not None:
                raise ContractError("meta information supplied but the model's meta schema is empty")
            if mask is not None and mask.size:
                raise ContractError("meta mask supplied but the model's meta schema is empty")
            return None
        return self.meta_embed(meta, batch_size, mask)

    def forward_state(self, images, meta: Optional[MetaBatch] = None, mask: Optional[np.ndarray] = None,
                      rng: Optional[np.random.Generator] = None, features: Optional[Tensor] = None,
                      zero_vision: bool = False) -> ForwardState:
        c = self.config
        if features is None:
            features = self.conv_features(images, rng)
        B = features.shape[0]
        d3, d4 = c.dims[3], c.dims[4]

        vision = self.embed3(features)  # [B, M3^2, D3]
        if zero_vision:
            vision = T.scale(vision, 0.0)
        extras = []
        if self.cls_token3 is not None:
            extras.append(T.broadcast_to(self.cls_token3, (B, 1, d3)))
        meta_tok = self.meta_tokens(B, meta, mask)
        if meta_tok is not None:
            extras.append(meta_tok)
        x = T.concat(extras + [vision], axis=1)
        bias = self.bias3(x.shape[1])
        for blk in self.stage3:
            x = blk(x, bias, rng)
        s3 = x
        n_extra = c.n_extra

        # S3 -> S4: vision tokens re-gridded and downsampled, extras lifted
        m3 = features.shape[2] // 2
        vis3 = T.reshape(T.transpose(s3[:, n_extra:], (0, 2, 1)), (B, d3, m3, m3))
        vision4 = self.embed4(vis3)
        extras4 = []
        z1 = s3[:, 0] if c.has_class_token else None
        lift_from = 0
        if c.class_token_mode == "parallel":
            extras4.append(T.broadcast_to(self.cls_token4, (B, 1, d4)))
            lift_from = 1
        if n_extra - lift_from > 0:
            extras4.append(self.extra_lift(s3[:, lift_from:n_extra]))
        x = T.concat(extras4 + [vision4], axis=1)
        bias = self.bias4(x.shape[1])
        for blk in self.stage4:
            x = blk(x, bias, rng)
        s4 = x

        if c.class_token_mode == "parallel":
            z2 = s4[:, 0]
            y = self.aggregate(z1, z2)
        elif c.class_token_mode == "serial":
            z2 = s4[:, 0]
            y = self.final_norm(z2)
        else:
            z2 = None
            y = self.final_norm(T.mean(s4[:, n_extra:], axis=1))
        logits = self.head(y)
        return ForwardState(logits=logits, s3_tokens=s3, s4_tokens=s4, n_extra=n_extra, z1=z1, z2=z2)

    def forward(self, images, meta: Optional[MetaBatch] = None, mask: Optional[np.ndarray] = None,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.forward_state(images, meta, mask, rng).logits

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ShapeError(f"state dict mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = np.ascontiguousarray(arr.astype(p.dtype, copy=True))


def downsample_kind(stage: int) -> str:
    """How stage ``stage`` halves its input: stride-2 conv, max-pool, or patch embedding."""
    kinds = {0: "conv", 1: "conv", 2: "maxpool", 3: "patch-embed", 4: "patch-embed"}
    try:
        return kinds[stage]
    except KeyError:
        raise ConfigError(f"unknown stage S{stage}; expected 0..4") from None


def stage_shapes(config: ModelConfig, image_size: Optional[int] = None) -> List[Tuple[int, int]]:
    """``(side, channels)`` at the output of each stage S0..S4."""
    size = image_size or config.image_size
    return [(size // 2 ** (i + 1), d) for i, d in enumerate(config.dims)]
