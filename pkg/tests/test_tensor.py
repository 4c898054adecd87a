import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metaformer import tensor as T
from metaformer.errors import ConfigError, ContractError, GraphError, ShapeError
from metaformer.gradcheck import check_op, relative_error
from metaformer.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- matmul ------------------------------------------------------------------
def test_matmul_identity():
    b = np.array([[1.5, -2.0], [3.0, 0.25]])
    out = T.matmul(np.eye(2), b)
    np.testing.assert_array_equal(out.data, b)


def test_matmul_hand_arithmetic():
    assert T.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_sum_gradient_is_ones_times_bT(rng):
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    T.tsum(T.matmul(a, b)).backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)
    res = check_op(T.matmul, [a.data, b.data], rng)
    assert res.worst < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(5, 2\)"):
        T.matmul(np.zeros((3, 4)), np.zeros((5, 2)))


def test_matmul_broadcasts_batch_dims(rng):
    a, b = rng.standard_normal((2, 1, 3, 4)), rng.standard_normal((5, 4, 2))
    np.testing.assert_allclose(T.matmul(a, b).data, a @ b)
    assert check_op(T.matmul, [a, b], rng).worst < 1e-6


# -- softmax -------------------------------------------------------------------
def test_softmax_uniform_and_single():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(3))).data, np.full(3, 1 / 3), rtol=1e-15)
    assert T.softmax(Tensor(np.array([7.3]))).data.tolist() == [1.0]


def test_softmax_matches_extended_precision():
    import mpmath

    mpmath.mp.dps = 50
    exps = [mpmath.e ** k for k in (1, 2, 3)]
    ref = [float(e / sum(exps)) for e in exps]
    np.testing.assert_allclose(T.softmax(Tensor(np.array([1.0, 2.0, 3.0]))).data, ref, rtol=1e-15, atol=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.booleans())
def test_softmax_rows_are_distributions(values, ordered):
    p = T.softmax(Tensor(np.array(values)), ordered=ordered).data
    assert abs(p.sum() - 1.0) < 1e-9
    assert np.all((p >= 0) & (p <= 1))


def test_softmax_stable_for_large_logits():
    p = T.softmax(Tensor(np.array([1000.0, 1000.0]))).data
    np.testing.assert_allclose(p, [0.5, 0.5])


def test_softmax_nan_propagates():
    assert np.isnan(T.softmax(Tensor(np.array([0.0, np.nan]))).data).all()


def test_ordered_softmax_is_permutation_invariant_bitwise(rng):
    x = rng.standard_normal((4, 9)) * 3
    perm = rng.permutation(9)
    a = T.softmax(Tensor(x), ordered=True).data
    b = T.softmax(Tensor(x[:, perm]), ordered=True).data
    assert np.array_equal(a[:, perm], b)


# -- layernorm -----------------------------------------------------------------
def test_layernorm_constant_input_gives_zeros():
    out = T.layernorm(Tensor(np.full((2, 5), 3.7)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    assert np.all(out.data == 0.0)


def test_layernorm_already_normalised():
    out = T.layernorm(Tensor(np.array([1.0, -1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-15)
    np.testing.assert_allclose(out.data, [1.0, -1.0], rtol=1e-12)


def test_layernorm_statistics(rng):
    x = rng.standard_normal(64) * 5 + 2
    eps = 1e-5
    y = T.layernorm(Tensor(x), eps=eps).data
    assert abs(y.mean()) < 1e-12
    expected_var = x.var() / (x.var() + eps)
    assert abs(y.var() - expected_var) < 1e-9


def test_layernorm_rejects_nonpositive_eps():
    with pytest.raises(ConfigError):
        T.layernorm(Tensor(np.zeros(3)), eps=0.0)


def test_layernorm_channel_axis_matches_last_axis(rng):
    x = rng.standard_normal((2, 4, 3, 3))
    g, b = rng.standard_normal(4), rng.standard_normal(4)
    a = T.layernorm(Tensor(x), Tensor(g), Tensor(b), axis=1).data
    ref = T.layernorm(Tensor(x.transpose(0, 2, 3, 1)), Tensor(g), Tensor(b)).data.transpose(0, 3, 1, 2)
    np.testing.assert_allclose(a, ref, rtol=1e-12, atol=1e-14)


def test_layernorm_gamma_shape_checked():
    with pytest.raises(ShapeError):
        T.layernorm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)))


# -- conv2d ------------------------------------------------------------------------
def _conv_reference(x, w, stride, pad, groups):
    B, C, H, W = x.shape
    O, Cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    og = O // groups
    for b in range(B):
        for o in range(O):
            g = o // og
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[b, g * Cg:(g + 1) * Cg, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


def test_conv_identity_1x1():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    w = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv_all_ones_hand_count():
    out = T.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    assert out[2, 2] == 9 and out[0, 0] == 4 and out[0, 4] == 4 and out[0, 2] == 6


@pytest.mark.parametrize("cin,cout,k,stride,pad,groups", [
    (3, 4, 3, 1, 1, 1), (3, 5, 3, 2, 1, 1), (4, 4, 3, 2, 1, 4), (4, 6, 3, 1, 1, 2), (3, 2, 1, 1, 0, 1),
    (2, 3, 2, 2, 0, 1),
])
def test_conv_matches_loop_reference(rng, cin, cout, k, stride, pad, groups):
    x = rng.standard_normal((2, cin, 7, 6))
    w = rng.standard_normal((cout, cin // groups, k, k))
    out = T.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad, groups=groups).data
    np.testing.assert_allclose(out, _conv_reference(x, w, stride, pad, groups), rtol=1e-10, atol=1e-12)


def test_conv_gradient_2x3x8x8(rng):
    x, w, b = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    res = check_op(lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1), [x, w, b], rng)
    assert res.worst < 1e-5


def test_conv_stride2_halves_even_dims(rng):
    out = T.conv2d(Tensor(rng.standard_normal((1, 2, 10, 6))), Tensor(rng.standard_normal((3, 2, 3, 3))),
                   stride=2, padding=1)
    assert out.shape == (1, 3, 5, 3)


def test_conv_negative_output_size():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


def test_conv_groups_must_divide():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((4, 1, 3, 3))), groups=2)


# -- elementwise ------------------------------------------------------------------
def test_activation_values():
    assert T.sigmoid(Tensor(np.array(0.0))).item() == 0.5
    assert T.silu(Tensor(np.array(0.0))).item() == 0.0
    x = np.array([-3.0, -0.5, 0.0, 0.7, 4.0])
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=1e-14)


def test_sigmoid_extreme_inputs_finite():
    y = T.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0


@pytest.mark.parametrize("name", ["gelu", "silu", "sigmoid", "tanh", "exp"])
def test_activation_gradients(rng, name):
    op = getattr(T, name)
    assert check_op(op, [rng.standard_normal((4, 5)) * 2], rng).worst < 1e-6


def test_broadcast_error():
    with pytest.raises(ShapeError):
        T.add(np.zeros((2, 3)), np.zeros((4,)))


def test_scale_and_broadcast_gradients(rng):
    a, b = rng.standard_normal((3, 1, 4)), rng.standard_normal((5, 1))
    assert check_op(lambda a, b: T.mul(T.scale(a, 2.5), b), [a, b], rng).worst < 1e-8


# -- backward ------------------------------------------------------------------------
def test_backward_sum_gives_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_sum_squares():
    x = leaf([1.0, 2.0])
    T.tsum(T.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_twice_is_error():
    x = leaf([1.0, 2.0])
    loss = T.tsum(T.square(x))
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_non_scalar_is_contract_error():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        T.square(x).backward()


def test_shared_subexpression_accumulates():
    x = leaf([3.0])
    y = T.mul(x, x)
    T.tsum(T.add(y, y)).backward()
    assert x.grad.tolist() == [12.0]


def test_deep_chain_does_not_recurse():
    x = leaf([1.0])
    y = x
    for _ in range(5000):
        y = T.scale(y, 1.0)
    T.tsum(y).backward()
    assert x.grad.tolist() == [1.0]


def test_no_grad_builds_no_graph():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        y = T.square(x)
    assert not y.requires_grad


def test_getitem_advanced_index_accumulates():
    x = leaf(np.arange(4.0))
    T.tsum(T.getitem(x, np.array([0, 0, 3]))).backward()
    assert x.grad.tolist() == [2.0, 0.0, 0.0, 1.0]


def test_where_routes_gradient():
    a, b = leaf([1.0, 2.0, 3.0]), leaf([10.0, 20.0, 30.0])
    mask = np.array([True, False, True])
    T.tsum(T.where(mask, a, b)).backward()
    assert a.grad.tolist() == [1, 0, 1] and b.grad.tolist() == [0, 1, 0]


# -- pooling and loss ----------------------------------------------------------------
def test_max_pool_single_window():
    assert T.max_pool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2).data.item() == 4.0


def test_max_pool_gradient_routes_to_argmax(rng):
    x = leaf(rng.permutation(16).astype(float).reshape(1, 1, 4, 4))
    T.tsum(T.max_pool2d(x, 2)).backward()
    assert x.grad.sum() == 4
    for i in range(2):
        for j in range(2):
            win = x.data[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
            g = x.grad[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
            assert g[np.unravel_index(win.argmax(), win.shape)] == 1
    assert check_op(lambda t: T.max_pool2d(t, 2), [x.data], rng).worst < 1e-8


def test_cross_entropy_uniform_is_log_c():
    loss = T.cross_entropy(Tensor(np.zeros((3, 7))), np.array([0, 3, 6]))
    assert abs(loss.item() - math.log(7)) < 1e-14


def test_cross_entropy_confident_correct_is_zero():
    logits = np.array([[500.0, 0.0, 0.0]])
    assert T.cross_entropy(Tensor(logits), np.array([0])).item() < 1e-12


def test_cross_entropy_gradient_with_smoothing(rng):
    labels = np.array([1, 0, 2, 2])
    res = check_op(lambda z: T.cross_entropy(z, labels, 0.1), [rng.standard_normal((4, 3))], rng)
    assert res.worst < 1e-7


def test_cross_entropy_bad_label():
    with pytest.raises(ContractError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


# -- engine ------------------------------------------------------------------------------
def test_f32_switch():
    with T.default_dtype(np.float32):
        assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


def test_determinism_bit_identical(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    a = T.gelu(T.conv2d(Tensor(x), Tensor(w), padding=1)).data
    b = T.gelu(T.conv2d(Tensor(x), Tensor(w), padding=1)).data
    assert np.array_equal(a, b)


def test_relative_error_zero_gradients():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0


OPS_FOR_RANDOM_INSTANCES = ["add", "mul", "gelu", "silu", "sigmoid", "softmax", "layernorm", "matmul"]


@pytest.mark.parametrize("name", OPS_FOR_RANDOM_INSTANCES)
def test_randomised_gradient_instances(name):
    # 100 random instances per op, relative error < 1e-4 each
    rng = np.random.default_rng(hash(name) % 2 ** 32)
    for _ in range(100):
        n, m = rng.integers(1, 4, size=2)
        a = rng.standard_normal((n, m)) * rng.uniform(0.1, 3)
        if name in ("add", "mul"):
            op, inputs = getattr(T, name), [a, rng.standard_normal((n, m))]
        elif name == "matmul":
            op, inputs = T.matmul, [a, rng.standard_normal((m, 2))]
        elif name == "softmax":
            op, inputs = (lambda x: T.softmax(x, axis=-1)), [a]
        elif name == "layernorm":
            # with d <= 2 the output saturates at +-1 and the input gradient is O(eps),
            # below what central differences resolve; use d >= 3
            a = rng.standard_normal((n, int(rng.integers(3, 6)))) * rng.uniform(0.1, 3)
            op, inputs = T.layernorm, [a, rng.standard_normal(a.shape[1]), rng.standard_normal(a.shape[1])]
        else:
            op, inputs = getattr(T, name), [a]
        assert check_op(op, inputs, rng).worst < 1e-4
