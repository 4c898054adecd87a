"""Central finite-difference gradient checking.

The relative error of a tensor's gradient is measured over the checked
coordinates as ``||analytic - numeric|| / max(||analytic||, ||numeric||)``.
When both norms are below ``zero_tol`` the gradient is treated as zero and
the error is reported as 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckResult:
    errors: Dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst_name(self) -> Optional[str]:
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)

    def passed(self, tol: float) -> bool:
        return self.worst <= tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, zero_tol: float = 1e-10) -> float:
    a = np.linalg.norm(np.ravel(analytic))
    n = np.linalg.norm(np.ravel(numeric))
    scale = max(a, n)
    if scale < zero_tol:
        return 0.0
    return float(np.linalg.norm(np.ravel(analytic) - np.ravel(numeric)) / scale)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Dict[str, Tensor],
    h: float = 1e-5,
    coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckResult:
    """Compare backprop gradients of ``loss_fn()`` against central differences.

    ``tensors`` maps names to leaf tensors that ``loss_fn`` reads.  With
    ``coords`` set, only that many randomly chosen coordinates per tensor
    are perturbed (all coordinates otherwise).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in tensors.items()}

    result = GradCheckResult()
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        if coords is None or coords >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=coords, replace=False)
        numeric = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn().data)
            flat[i] = orig - h
            fm = float(loss_fn().data)
            flat[i] = orig
            numeric[k] = (fp - fm) / (2.0 * h)
        result.errors[name] = relative_error(analytic[name].reshape(-1)[idx], numeric)
    return result


def random_projection_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(out * weights)``; a generic probe for vector-valued ops."""
    from .tensor import mul, tsum

    return tsum(mul(out, Tensor(weights, dtype=out.dtype)))


def check_op(
    op: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    rng: Optional[np.random.Generator] = None,
    h: float = 1e-5,
) -> GradCheckResult:
    """Gradient-check ``op(*inputs)`` under a fixed random linear read-out."""
    rng = rng if rng is not None else np.random.default_rng(0)
    leaves = {f"input{i}": Tensor(np.array(x, dtype=np.float64), requires_grad=True) for i, x in enumerate(inputs)}
    probe = rng.standard_normal(op(*leaves.values()).shape)
    return check_gradients(lambda: random_projection_loss(op(*leaves.values()), probe), leaves, h=h, rng=rng)


# -- suites -----------------------------------------------------------------
SUITE_SCOPES = ("ops", "blocks", "model")
SUITE_TOLERANCE = 1e-4


def _ops_cases(rng: np.random.Generator):
    from . import tensor as T

    def r(*shape):
        return rng.standard_normal(shape)

    def pos(*shape):
        return rng.uniform(0.5, 2.0, size=shape)

    labels = np.array([0, 2, 1])
    mask = rng.random((3, 4)) < 0.5
    return [
        ("add", T.add, [r(3, 4), r(4)]),
        ("sub", T.sub, [r(3, 4), r(3, 1)]),
        ("mul", T.mul, [r(3, 4), r(1, 4)]),
        ("div", T.div, [r(3, 4), pos(3, 4)]),
        ("scale", lambda x: T.scale(x, -1.7), [r(3, 4)]),
        ("exp", T.exp, [r(3, 4)]),
        ("log", T.log, [pos(3, 4)]),
        ("sqrt", T.sqrt, [pos(3, 4)]),
        ("square", T.square, [r(3, 4)]),
        ("sigmoid", T.sigmoid, [r(3, 4) * 3]),
        ("silu", T.silu, [r(3, 4)]),
        ("relu", T.relu, [r(3, 4) + np.sign(r(3, 4)) * 0.1]),
        ("tanh", T.tanh, [r(3, 4)]),
        ("gelu", T.gelu, [r(3, 4) * 2]),
        ("where", lambda a, b: T.where(mask, a, b), [r(3, 4), r(4)]),
        ("sum", lambda x: T.tsum(x, axis=1), [r(3, 4, 2)]),
        ("mean", lambda x: T.mean(x, axis=(0, 2), keepdims=True), [r(3, 4, 2)]),
        ("reshape", lambda x: T.reshape(x, (4, 6)), [r(2, 3, 4)]),
        ("transpose", lambda x: T.transpose(x, (2, 0, 1)), [r(2, 3, 4)]),
        ("getitem", lambda x: T.getitem(x, (slice(None), np.array([0, 2, 2]))), [r(3, 4)]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [r(2, 3), r(2, 2)]),
        ("stack", lambda a, b: T.stack([a, b], axis=0), [r(2, 3), r(2, 3)]),
        ("broadcast_to", lambda x: T.broadcast_to(x, (2, 3, 4)), [r(1, 3, 1)]),
        ("matmul", T.matmul, [r(2, 3, 4), r(4, 5)]),
        ("ordered_matmul", T.ordered_matmul, [r(2, 3, 4), r(2, 4, 5)]),
        ("linear", T.linear, [r(3, 4), r(5, 4), r(5)]),
        ("softmax", lambda x: T.softmax(x, axis=-1), [r(3, 5)]),
        ("softmax_ordered", lambda x: T.softmax(x, axis=-1, ordered=True), [r(2, 3, 5)]),
        ("log_softmax", lambda x: T.log_softmax(x, axis=-1), [r(3, 5)]),
        ("layernorm", lambda x, g, b: T.layernorm(x, g, b), [r(3, 6), r(6), r(6)]),
        ("layernorm_axis1", lambda x, g, b: T.layernorm(x, g, b, axis=1), [r(2, 4, 3, 3), r(4), r(4)]),
        ("conv2d", lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1), [r(2, 3, 6, 6), r(4, 3, 3, 3), r(4)]),
        ("conv2d_1x1", lambda x, w: T.conv2d(x, w), [r(2, 3, 4, 4), r(5, 3, 1, 1)]),
        ("conv2d_depthwise", lambda x, w: T.conv2d(x, w, stride=2, padding=1, groups=4),
         [r(2, 4, 6, 6), r(4, 1, 3, 3)]),
        ("conv2d_grouped", lambda x, w: T.conv2d(x, w, padding=1, groups=2), [r(2, 4, 5, 5), r(6, 2, 3, 3)]),
        ("max_pool2d", lambda x: T.max_pool2d(x, 2), [r(2, 3, 4, 4)]),
        ("cross_entropy", lambda x: T.cross_entropy(x, labels, 0.1), [r(3, 4)]),
    ]


def _module_check(module, make_input, rng: np.random.Generator, coords: Optional[int] = 6) -> float:
    """Worst relative error over a module's input and all of its parameters."""
    x = Tensor(make_input(), requires_grad=True)
    leaves = {"input": x}
    leaves.update(dict(module.named_parameters()))
    probe = rng.standard_normal(module(x).shape)
    res = check_gradients(lambda: random_projection_loss(module(x), probe), leaves, coords=coords, rng=rng)
    return res.worst


def _blocks_cases(rng: np.random.Generator):
    from . import tensor as T
    from .attention import Attention, AttentionSpec, OverlapPatchEmbed, RelativeBias, TransformerBlock
    from .meta import MetaEmbedding, MetaSchema, MetaChannel, collate_meta, MetaRecord
    from .model import AggregateLayer
    from .nn import ConvStem, MBConv, MBConvSpec, MlpBlock, Module, SqueezeExcite

    def img(c, s):
        return lambda: rng.standard_normal((2, c, s, s))

    def seq(n, d):
        return lambda: rng.standard_normal((2, n, d))

    class WithBias(Module):
        def __init__(self, inner, bias):
            self.inner, self.bias = inner, bias

        def forward(self, x):
            return self.inner(x, self.bias(x.shape[1]))

    class Aggregate(Module):
        def __init__(self, layer, d3):
            self.layer, self.d3 = layer, d3

        def forward(self, x):
            return self.layer(x[:, 0, :self.d3], x[:, 1])

    class Embedding(Module):
        def __init__(self, emb, batch):
            self.emb, self.batch = emb, batch

        def forward(self, x):
            return T.add(self.emb(self.batch, 2), x)

    schema = MetaSchema((MetaChannel("geo"), MetaChannel("datetime"), MetaChannel("attribute", dim=3),
                         MetaChannel("text", vocab=7, max_len=4, word_dim=5)))
    recs = [MetaRecord(geo=(10.0, 20.0), datetime=(3, 4.5), attributes=np.array([1.0, 0.0, 1.0]), text=[[1, 2, 9]]),
            MetaRecord(geo=(-40.0, 170.0), text=[[3, 4, 5, 6, 0]])]
    batch = collate_meta(recs, schema)
    m, n_extra = 3, 2
    spec = AttentionSpec(8, head_dim=4)
    return [
        ("conv_stem", ConvStem(3, 6, 2, rng), img(3, 6)),
        ("squeeze_excite", SqueezeExcite(8, 2, rng), img(8, 4)),
        ("mbconv_residual", MBConv(MBConvSpec(4, 4), rng), img(4, 4)),
        ("mbconv_stride2", MBConv(MBConvSpec(4, 6, stride=2), rng), img(4, 4)),
        ("mlp_block", MlpBlock(8, rng), seq(3, 8)),
        ("relative_attention", WithBias(Attention(spec, rng), RelativeBias(m, n_extra, spec.num_heads, rng)),
         seq(m * m + n_extra, 8)),
        ("transformer_block", WithBias(TransformerBlock(spec, rng), RelativeBias(m, n_extra, spec.num_heads, rng)),
         seq(m * m + n_extra, 8)),
        ("overlap_patch_embed", OverlapPatchEmbed(4, 8, rng), img(4, 4)),
        ("aggregate_depthwise", Aggregate(AggregateLayer(6, 8, 6, rng), 6), seq(2, 8)),
        ("aggregate_dense", Aggregate(AggregateLayer(6, 8, 6, rng, fusion="dense"), 6), seq(2, 8)),
        ("meta_embedding", Embedding(MetaEmbedding(schema, 6, rng), batch), seq(schema.num_tokens, 6)),
    ]


def _model_cases():
    from .meta import MetaChannel, MetaSchema
    from .model import preset

    schema = MetaSchema((MetaChannel("geo"), MetaChannel("datetime"), MetaChannel("text", vocab=9, max_len=3,
                                                                                   word_dim=4)))
    # (name, config, coordinates checked per parameter tensor)
    return [
        ("tiny_parallel_meta", preset("tiny", meta=schema), 20),
        ("tiny_serial", preset("tiny", class_token_mode="serial"), 4),
        ("tiny_gap", preset("tiny", class_token_mode="gap"), 4),
    ]


def _model_check(config, rng: np.random.Generator, coords: int) -> float:
    from . import tensor as T
    from .meta import MetaRecord, collate_meta
    from .model import MetaFormer

    model = MetaFormer(config, seed=int(rng.integers(1 << 31)))
    model.eval()
    images = Tensor(rng.standard_normal((2, config.in_channels, config.image_size, config.image_size)),
                    requires_grad=True)
    meta = None
    if config.meta:
        recs = [MetaRecord(geo=(12.0, -45.0), datetime=(7, 13.0), text=[[1, 2]]),
                MetaRecord(geo=(-33.0, 151.0), datetime=(1, 2.0), text=[[4, 5, 6, 8]])]
        meta = collate_meta(recs, config.meta)
    labels = np.array([1, 3])
    leaves = {"images": images}
    leaves.update(dict(model.named_parameters()))

    def loss():
        return T.cross_entropy(model(images, meta), labels)

    return check_gradients(loss, leaves, coords=coords, rng=rng).worst


def run_suite(scope: str, seed: int = 0) -> GradCheckResult:
    """Finite-difference suite at float64; errors are the worst per component."""
    from . import tensor as T
    from .errors import ConfigError

    if scope not in SUITE_SCOPES:
        raise ConfigError(f"unknown gradcheck scope {scope!r}; expected one of {SUITE_SCOPES}")
    rng = np.random.default_rng(seed)
    result = GradCheckResult()
    with T.default_dtype(np.float64):
        if scope == "ops":
            for name, op, inputs in _ops_cases(rng):
                result.errors[name] = check_op(op, inputs, rng).worst
        elif scope == "blocks":
            for name, module, make in _blocks_cases(rng):
                result.errors[name] = _module_check(module, make, rng)
        else:
            for name, config, coords in _model_cases():
                result.errors[name] = _model_check(config, rng, coords)
    return result
