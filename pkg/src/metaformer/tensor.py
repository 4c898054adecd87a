"""Dense tensors with define-by-run reverse-mode autodiff.

Every differentiable operation builds a node holding its parents and a
closure mapping the output gradient to one gradient per parent.  The graph
is rebuilt on every forward pass and released by :meth:`Tensor.backward`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, GraphError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True

# tanh approximation of gelu: 0.5 x (1 + tanh(c (x + a x^3)))
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_released", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = ""
        self._released = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` on every reachable leaf that requires grad.

        ``self`` must be a scalar unless an explicit output gradient is given.
        The graph is released afterwards; a second call raises GraphError.
        """
        if self._released:
            raise GraphError("backward called twice on the same graph; rebuild it with a new forward pass")
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"output gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node.requires_grad and g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._released = True
        # leaves reachable only through zero paths still get a gradient
        for node in order:
            if node.requires_grad and node.grad is None and node._op == "" and not node._released:
                node.grad = np.zeros_like(node.data)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x: ArrayLike, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and not isinstance(x, np.ndarray):
        dtype = _DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


def _lift(a, b):
    """Coerce a pair of operands to tensors of a common dtype."""
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(b, Tensor) and isinstance(a, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _make(data: np.ndarray, parents: Iterable[Tensor], backward: Callable, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._released = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple, what: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{what}: shapes {a} and {b} are not broadcast-compatible") from None


# -- elementwise ------------------------------------------------------------
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape(a.shape, b.shape, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape(a.shape, b.shape, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape(a.shape, b.shape, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape(a.shape, b.shape, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), backward, "div")


def scale(x: ArrayLike, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.data.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return _make(out, (x,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


def relu(x: Tensor) -> Tensor:
    return _make(np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),), "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    z = x.data
    z2 = z * z
    t = np.tanh(GELU_C * z * (1.0 + GELU_A * z2))
    out = 0.5 * z * (1.0 + t)

    def backward(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * z2)
        return (g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner),)

    return _make(out, (x,), backward, "gelu")


def where(mask: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b`` (mask is constant)."""
    a, b = _lift(a, b)
    mask = np.asarray(mask, dtype=bool)
    shape = _broadcast_shape(_broadcast_shape(a.shape, b.shape, "where"), mask.shape, "where")
    out = np.where(mask, a.data, b.data)

    def backward(g):
        ga = np.where(mask, g, 0.0).astype(g.dtype, copy=False)
        gb = np.where(mask, 0.0, g).astype(g.dtype, copy=False)
        return _unbroadcast(np.broadcast_to(ga, shape), a.shape), _unbroadcast(np.broadcast_to(gb, shape), b.shape)

    return _make(out, (a, b), backward, "where")


# -- reductions & shape -----------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    return scale(tsum(x, axes, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = x.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.ascontiguousarray(out), (x,), backward, "getitem")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {[t.shape for t in tensors]} differ off-axis")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax))

    return _make(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    _broadcast_shape(x.shape, shape, "broadcast_to")
    out = np.broadcast_to(x.data, shape).copy()
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


# -- linear algebra ---------------------------------------------------------
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from None
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def ordered_matmul(p: Tensor, v: Tensor) -> Tensor:
    """``p @ v`` whose reduction order ignores the order of the summed axis.

    Products are sorted along the contracted axis before summation, so any
    simultaneous permutation of ``p``'s columns and ``v``'s rows yields a
    bit-identical result.  Backward is the ordinary matmul gradient.
    """
    if p.shape[-1] != v.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {p.shape} @ {v.shape}")
    prod = p.data[..., :, :, None] * v.data[..., None, :, :]
    out = np.sort(prod, axis=-2).sum(axis=-2)

    def backward(g):
        gp = _unbroadcast(np.matmul(g, np.swapaxes(v.data, -1, -2)), p.shape) if p.requires_grad else None
        gv = _unbroadcast(np.matmul(np.swapaxes(p.data, -1, -2), g), v.shape) if v.requires_grad else None
        return gp, gv

    return _make(out, (p, v), backward, "ordered_matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape} do not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[0],))

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "linear")


# -- normalisation & softmax -----------------------------------------------
def softmax(x: Tensor, axis: int = -1, ordered: bool = False) -> Tensor:
    """Max-subtracted softmax.  NaN inputs propagate NaN.

    ``ordered=True`` sums the denominator in sorted order, making the result
    independent of the order of entries along ``axis``.
    """
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    if ordered:
        denom = np.sort(e, axis=axis).sum(axis=axis, keepdims=True)
    else:
        denom = e.sum(axis=axis, keepdims=True)
    y = e / denom

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def layernorm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None, eps: float = 1e-5,
              axis: int = -1) -> Tensor:
    """Normalise over ``axis`` (default last), then apply ``gamma * xhat + beta``."""
    if not eps > 0:
        raise ConfigError(f"layernorm eps must be > 0, got {eps}")
    ax = axis % x.ndim
    d = x.shape[ax]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layernorm {name} shape {p.shape} does not match dim {d} of {x.shape}")
    bshape = [1] * x.ndim
    bshape[ax] = d
    other = tuple(i for i in range(x.ndim) if i != ax)
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(bshape)
    if beta is not None:
        out = out + beta.data.reshape(bshape)

    def backward(g):
        gxhat = g * gamma.data.reshape(bshape) if gamma is not None else g
        gx = None
        if x.requires_grad:
            gx = inv * (gxhat - gxhat.mean(axis=ax, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=ax, keepdims=True))
        res = [gx]
        if gamma is not None:
            res.append((g * xhat).sum(axis=other) if gamma.requires_grad else None)
        if beta is not None:
            res.append(g.sum(axis=other) if beta.requires_grad else None)
        return tuple(res)

    parents = tuple(p for p in (x, gamma, beta) if p is not None)
    return _make(out, parents, backward, "layernorm")


# -- convolution & pooling --------------------------------------------------
def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-d cross-correlation over ``x[B, C, H, W]`` with ``weight[O, C/groups, kh, kw]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cg, kh, kw = weight.shape
    if C % groups or O % groups:
        raise ShapeError(f"conv2d channels in={C} out={O} not divisible by groups={groups}")
    if Cg != C // groups:
        raise ShapeError(f"conv2d weight {weight.shape} expects {Cg * groups} input channels, got {C}")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d output size {Ho}x{Wo} is not positive for input {x.shape}, kernel {kh}x{kw}")
    if kh == kw == 1 and stride == 1 and padding == 0 and groups == 1:
        return _conv1x1(x, weight, bias)
    if groups == C == O:
        return _depthwise(x, weight, bias, stride, padding, Ho, Wo)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    G, Og = groups, O // groups
    K = Cg * kh * kw
    if groups == 1:
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, K)
        w2 = weight.data.reshape(O, K)
        out = (cols @ w2.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    else:
        # [B, G, Cg, Ho, Wo, kh, kw] -> [G, B*Ho*Wo, K]
        cols = (win.reshape(B, G, Cg, Ho, Wo, kh, kw).transpose(1, 0, 3, 4, 2, 5, 6)
                .reshape(G, B * Ho * Wo, K))
        w2 = weight.data.reshape(G, Og, K)
        if Og == 1 and Cg == 1:
            out = np.einsum("gnk,gk->gn", cols, w2[:, 0, :])[..., None]
        else:
            out = np.matmul(cols, w2.transpose(0, 2, 1))
        out = out.reshape(G, B, Ho, Wo, Og).transpose(1, 0, 4, 2, 3).reshape(B, O, Ho, Wo)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1)

    def backward(g):
        gx = gw = gb = None
        if groups == 1:
            g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
            if weight.requires_grad:
                gw = (g2.T @ cols).reshape(weight.shape)
            if x.requires_grad:
                gcols = (g2 @ w2).reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
                gx = _col2im(gcols, xp.shape, stride, padding, Ho, Wo)
        else:
            g2 = g.reshape(B, G, Og, Ho, Wo).transpose(1, 0, 3, 4, 2).reshape(G, B * Ho * Wo, Og)
            if weight.requires_grad:
                gw = np.matmul(g2.transpose(0, 2, 1), cols).reshape(weight.shape)
            if x.requires_grad:
                gcols = np.matmul(g2, w2)  # [G, N, K]
                gcols = (gcols.reshape(G, B, Ho, Wo, Cg, kh, kw).transpose(1, 0, 4, 2, 3, 5, 6)
                         .reshape(B, C, Ho, Wo, kh, kw))
                gx = _col2im(gcols, xp.shape, stride, padding, Ho, Wo)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "conv2d")


def _conv1x1(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    B, C, H, W = x.shape
    O = weight.shape[0]
    x3 = x.data.reshape(B, C, H * W)
    w2 = weight.data.reshape(O, C)
    out = np.matmul(w2, x3).reshape(B, O, H, W)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1)

    def backward(g):
        g3 = g.reshape(B, O, H * W)
        gx = np.matmul(w2.T, g3).reshape(B, C, H, W) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "conv2d")


def _depthwise(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int, padding: int,
               Ho: int, Wo: int) -> Tensor:
    # shift-and-accumulate over the k x k taps; cheaper than im2col for one channel per group
    C = x.shape[1]
    kh, kw = weight.shape[2:]
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    w = weight.data[:, 0]
    taps = [(i, j, (slice(None), slice(None), slice(i, i + stride * Ho, stride), slice(j, j + stride * Wo, stride)))
            for i in range(kh) for j in range(kw)]
    out = np.zeros((x.shape[0], C, Ho, Wo), dtype=np.result_type(xp, w))
    for i, j, sl in taps:
        out += xp[sl] * w[:, i, j].reshape(1, C, 1, 1)
    if bias is not None:
        out += bias.data.reshape(1, C, 1, 1)

    def backward(g):
        gx = gw = None
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for i, j, sl in taps:
                gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xp[sl])
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i, j, sl in taps:
                gxp[sl] += g * w[:, i, j].reshape(1, C, 1, 1)
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            gx = np.ascontiguousarray(gxp)
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "conv2d")


def _col2im(gcols: np.ndarray, padded_shape: tuple, stride: int, padding: int, Ho: int, Wo: int) -> np.ndarray:
    """Scatter-add window gradients ``[B, C, Ho, Wo, kh, kw]`` back to the input."""
    kh, kw = gcols.shape[-2:]
    gxp = np.zeros(padded_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[..., i, j]
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gxp)


def max_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping ``kernel x kernel`` max pooling (stride == kernel).

    The gradient is routed to the first maximal entry of each window.
    """
    B, C, H, W = x.shape
    if H % kernel or W % kernel:
        raise ShapeError(f"max_pool2d: spatial dims {H}x{W} not divisible by {kernel}")
    Ho, Wo = H // kernel, W // kernel
    win = x.data.reshape(B, C, Ho, kernel, Wo, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, kernel * kernel)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, Ho, Wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


# -- losses -----------------------------------------------------------------
def cross_entropy(logits: Tensor, labels: np.ndarray, label_smoothing: float = 0.0) -> Tensor:
    """Mean negative log-likelihood with optional label smoothing."""
    from .errors import ContractError

    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects logits [B, C] and labels [B], got {logits.shape} and {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c or not np.issubdtype(labels.dtype, np.integer)):
        raise ContractError(f"labels must be integers in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    if not 0.0 <= label_smoothing < 1.0:
        raise ConfigError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    target = np.full((n, c), label_smoothing / c, dtype=logits.dtype)
    target[np.arange(n), labels] += 1.0 - label_smoothing
    lsm = log_softmax(logits, axis=-1)
    return scale(tsum(mul(lsm, Tensor(target))), -1.0 / n)
