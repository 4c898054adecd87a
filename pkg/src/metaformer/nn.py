"""Parameter containers and the convolutional building blocks.

Normalisation inside conv stages is a per-position layer norm over channels
so that results never depend on batch composition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that always requires grad."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Minimal module: parameters and children are discovered from attributes."""

    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _dtype():
    return T.get_default_dtype()


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    x = np.clip(x, -2.0, 2.0)
    return (x * std).astype(_dtype())


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True,
                 std: float = 0.02):
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(trunc_normal(rng, (out_features, in_features), std))
        self.bias = Parameter(np.zeros(out_features, dtype=_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        if not eps > 0:
            raise ConfigError(f"LayerNorm eps must be > 0, got {eps}")
        self.dim, self.eps = dim, eps
        self.weight = Parameter(np.ones(dim, dtype=_dtype()))
        self.bias = Parameter(np.zeros(dim, dtype=_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.weight, self.bias, self.eps)


class ChannelNorm(LayerNorm):
    """Layer norm over the channel axis of a ``[B, C, H, W]`` map."""

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.weight, self.bias, self.eps, axis=1)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, groups: int = 1, bias: bool = True):
        if in_ch % groups or out_ch % groups:
            raise ConfigError(f"channels {in_ch}->{out_ch} not divisible by groups={groups}")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_out = kernel * kernel * out_ch // groups
        std = math.sqrt(2.0 / fan_out)
        self.weight = Parameter((rng.standard_normal((out_ch, in_ch // groups, kernel, kernel)) * std).astype(_dtype()))
        self.bias = Parameter(np.zeros(out_ch, dtype=_dtype())) if bias else None

    def output_size(self, size: int) -> int:
        return T.conv_output_size(size, self.kernel, self.stride, self.padding)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"Conv2d expects {self.in_ch} input channels, got {x.shape}")
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


def drop_path(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Per-sample stochastic depth with survival rescaling.

    Identity at eval time or when ``rate == 0``.  ``rate >= 1`` drops the
    branch entirely.
    """
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        return T.scale(x, 0.0)
    if rng is None:
        raise ConfigError("drop_path in training mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random((x.shape[0],) + (1,) * (x.ndim - 1)) < keep).astype(x.dtype) / keep
    return T.mul(x, Tensor(mask, dtype=x.dtype))


def drop_path_rates(total_blocks: int, max_rate: float) -> List[float]:
    """Per-block stochastic depth rates, linearly spaced from 0 to ``max_rate``."""
    if total_blocks <= 0:
        return []
    if total_blocks == 1:
        return [0.0]
    return [max_rate * i / (total_blocks - 1) for i in range(total_blocks)]


def stem_channels(dim: int, layers: int) -> List[int]:
    """Output channels of each stem conv: half width, widening to ``dim`` at the last layer."""
    half = max(1, dim // 2)
    return [half] * (layers - 1) + [dim]


class ConvStem(Module):
    """Stage S0: stride-2 conv followed by stride-1 convs, each conv+norm+gelu."""

    def __init__(self, in_ch: int, dim: int, layers: int, rng: np.random.Generator):
        if layers < 1:
            raise ConfigError(f"conv stem needs at least one layer, got {layers}")
        self.convs = []
        self.norms = []
        c = in_ch
        for i, out in enumerate(stem_channels(dim, layers)):
            self.convs.append(Conv2d(c, out, 3, rng, stride=2 if i == 0 else 1, padding=1, bias=False))
            self.norms.append(ChannelNorm(out))
            c = out

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"conv stem needs even spatial dims, got {x.shape}")
        for conv, norm in zip(self.convs, self.norms):
            x = T.gelu(norm(conv(x)))
        return x


class SqueezeExcite(Module):
    """Channel gate: global mean -> reduce (silu) -> expand -> sigmoid."""

    def __init__(self, channels: int, reduced: int, rng: np.random.Generator):
        self.reduce = Conv2d(channels, reduced, 1, rng)
        self.expand = Conv2d(reduced, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        s = T.mean(x, axis=(2, 3), keepdims=True)
        s = T.silu(self.reduce(s))
        gate = T.sigmoid(self.expand(s))
        return T.mul(x, gate)


@dataclass
class MBConvSpec:
    in_ch: int
    out_ch: int
    stride: int = 1
    expansion: int = 4
    se_ratio: float = 0.25
    drop_path_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.se_ratio <= 1.0:
            raise ConfigError(f"se_ratio must be in (0, 1], got {self.se_ratio}")
        if self.stride not in (1, 2):
            raise ConfigError(f"MBConv stride must be 1 or 2, got {self.stride}")

    @property
    def hidden(self) -> int:
        return self.in_ch * self.expansion

    @property
    def se_hidden(self) -> int:
        return max(1, int(self.in_ch * self.se_ratio))

    @property
    def has_residual(self) -> bool:
        return self.stride == 1 and self.in_ch == self.out_ch


class MBConv(Module):
    """Inverted bottleneck: 1x1 expand -> 3x3 depthwise -> SE -> 1x1 project."""

    def __init__(self, spec: MBConvSpec, rng: np.random.Generator):
        self.spec = spec
        h = spec.hidden
        self.expand = Conv2d(spec.in_ch, h, 1, rng, bias=False)
        self.norm1 = ChannelNorm(h)
        self.dwconv = Conv2d(h, h, 3, rng, stride=spec.stride, padding=1, groups=h, bias=False)
        self.norm2 = ChannelNorm(h)
        self.se = SqueezeExcite(h, spec.se_hidden, rng)
        self.project = Conv2d(h, spec.out_ch, 1, rng, bias=False)
        self.norm3 = ChannelNorm(spec.out_ch)

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        if x.shape[1] != self.spec.in_ch:
            raise ShapeError(f"MBConv expects {self.spec.in_ch} channels, got {x.shape}")
        y = T.gelu(self.norm1(self.expand(x)))
        y = T.gelu(self.norm2(self.dwconv(y)))
        y = self.se(y)
        y = self.norm3(self.project(y))
        if self.spec.has_residual:
            return T.add(x, drop_path(y, self.spec.drop_path_rate, self.training, rng))
        return y


class MaxPoolDown(Module):
    """2x2 max-pool downsampling (used at the S2 boundary)."""

    def forward(self, x: Tensor) -> Tensor:
        return T.max_pool2d(x, 2)


class Mlp(Module):
    """``fc2(gelu(fc1(x)))``."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out_dim: Optional[int] = None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim if out_dim is not None else dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class MlpBlock(Module):
    """Pre-norm residual MLP: ``x + MLP(LN(x))`` with hidden = ratio * dim."""

    def __init__(self, dim: int, rng: np.random.Generator, ratio: int = 4, drop_path_rate: float = 0.0):
        self.dim = dim
        self.norm = LayerNorm(dim)
        self.mlp = Mlp(dim, ratio * dim, rng)
        self.drop_path_rate = drop_path_rate

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"MLP block expects last dim {self.dim}, got {x.shape}")
        return T.add(x, drop_path(self.mlp(self.norm(x)), self.drop_path_rate, self.training, rng))
