import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from triplex import tensor as T
from triplex.tensor import GraphError, ShapeError, Tensor, backward, grad_check


def leaf(a, dtype=np.float64):
    return Tensor(np.array(a, dtype=dtype), requires_grad=True)


def central_diff(fn, x: np.ndarray, eps=1e-6):
    """Independent numeric gradient of a numpy scalar function."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (fn(xp) - fn(xm)) / (2 * eps)
    return g


# ---------------------------------------------------------------- forward examples


def test_softmax_uniform_row():
    out = T.softmax(Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-7)


def test_matmul_identity(rng):
    a = rng.normal(size=(3, 3))
    out = Tensor(np.eye(3)) @ Tensor(a)
    np.testing.assert_array_equal(out.data, a)


def test_conv_box_filter_on_constant_image():
    c = 2.5
    x = Tensor(np.full((1, 1, 6, 7), c))
    w = Tensor(np.full((1, 1, 3, 3), 1 / 9))
    out = T.conv2d(x, w).data[0, 0]
    np.testing.assert_allclose(out[1:-1, 1:-1], c, rtol=1e-6)
    # same padding keeps the size; borders see zeros
    assert out.shape == (6, 7)
    assert out[0, 0] < c


def test_conv2d_matches_direct_loops(rng, f64):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    for stride in (1, 2):
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ho, wo = -(-7 // stride), -(-6 // stride)
        ref = np.zeros((2, 4, ho, wo))
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                ref[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w) + b
        np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_edge_padding_matches_loops(rng, f64):
    x = rng.normal(size=(1, 2, 5, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    for stride in (1, 2):
        out = T.conv2d(Tensor(x), Tensor(w), stride=stride, padding="edge").data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
        ho, wo = -(-5 // stride), -(-6 // stride)
        ref = np.zeros((1, 3, ho, wo))
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                ref[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w)
        np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_edge_padding_keeps_constant_image_flat():
    x = Tensor(np.full((1, 1, 6, 7), 2.5))
    w = Tensor(np.full((1, 1, 3, 3), 1 / 9))
    np.testing.assert_allclose(T.conv2d(x, w, padding="edge").data, 2.5, rtol=1e-6)


def test_depthwise_matches_direct_loops(rng, f64):
    x = rng.normal(size=(4, 5, 3))
    w = rng.normal(size=(3, 3, 3))
    out = T.depthwise_conv2d(Tensor(x), Tensor(w)).data
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros_like(x)
    for i in range(4):
        for j in range(5):
            ref[i, j] = (xp[i : i + 3, j : j + 3] * w).sum(axis=(0, 1))
    np.testing.assert_allclose(out, ref, atol=1e-12)


# ---------------------------------------------------------------- backward examples


def test_backward_square_sum():
    x = leaf([1.0, 2.0])
    grads = backward((x * x).sum())
    np.testing.assert_array_equal(grads[x], [2.0, 4.0])
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_sum_gives_ones(rng):
    x = leaf(rng.normal(size=(3, 4)))
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_mse_of_linear_map_matches_finite_differences(rng):
    W = rng.normal(size=(4, 4))
    xv = rng.normal(size=(4, 1))
    y = rng.normal(size=(4, 1))
    Wt = leaf(W)
    backward(T.mse(Wt @ Tensor(xv), y))
    numeric = central_diff(lambda w: np.mean((w @ xv - y) ** 2), W)
    rel = np.abs(Wt.grad - numeric) / np.maximum(1.0, np.abs(numeric))
    assert rel.max() < 1e-4


def test_fan_out_accumulates():
    x = leaf([3.0])
    y = x * 2.0 + x * x  # dy/dx = 2 + 2x
    backward(y.sum())
    np.testing.assert_array_equal(x.grad, [8.0])


def test_second_backward_raises():
    x = leaf([1.0, 2.0])
    loss = (x * x).sum()
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_non_scalar_backward_raises():
    x = leaf([1.0, 2.0])
    with pytest.raises(GraphError):
        backward(x * 2.0)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as info:
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))
    assert "matmul" in str(info.value)
    assert "(2, 3)" in str(info.value) and "(4, 2)" in str(info.value)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_default_dtype_is_float32():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with T.default_dtype(np.float64):
        assert T.tensor([1.0]).dtype == np.float64
    assert T.get_default_dtype() == np.float32


# ---------------------------------------------------------------- grad_check


def test_grad_check_sin(rng):
    x = leaf(rng.normal(size=10))
    assert grad_check(lambda t: t.sin().sum(), x) < 1e-6


def test_grad_check_sum_is_exact(rng):
    x = leaf(rng.normal(size=7))
    assert grad_check(lambda t: t.sum(), x) < 1e-9


def test_grad_check_detects_wrong_gradient(rng):
    x = leaf(rng.normal(size=5))

    def bad(t):
        # forward x^2 with a deliberately wrong backward
        return Tensor._make(t.data**2, (t,), lambda g: (g * t.data,), "bad").sum()

    assert grad_check(bad, x) > 0.1


def test_grad_check_restores_inputs(rng):
    v = rng.normal(size=4)
    x = leaf(v.copy())
    grad_check(lambda t: (t * t).sum(), x)
    np.testing.assert_array_equal(x.data, v)
    assert x.grad is None


def _inputs(rng, shape, positive=False):
    a = rng.normal(size=shape)
    return np.abs(a) + 0.5 if positive else a


UNARY = {
    "exp": lambda t: t.exp(),
    "log": lambda t: t.log(),
    "sqrt": lambda t: t.sqrt(),
    "sin": lambda t: t.sin(),
    "cos": lambda t: t.cos(),
    "tanh": lambda t: t.tanh(),
    "abs": lambda t: t.abs(),
    "neg": lambda t: -t,
    "pow": lambda t: t**3,
    "gelu": T.gelu,
    "relu": T.relu,
    "softmax": lambda t: T.softmax(t, axis=-1),
    "layer_norm": lambda t: T.layer_norm(t),
    "mean_axis": lambda t: t.mean(axis=1),
    "sum_axis": lambda t: t.sum(axis=0, keepdims=True),
    "reshape": lambda t: t.reshape(4, 3),
    "permute": lambda t: t.permute(1, 0),
    "getitem": lambda t: t[1:, ::2],
    "fancy_index": lambda t: t[np.array([0, 0, 2])],
    "take": lambda t: t.take(np.array([2, 0, 2]), axis=0),
    "scatter": lambda t: T.scatter_rows(t, np.array([4, 0, 2]), 6),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_primitive_gradients_float64(name):
    op = UNARY[name]
    positive = name in ("log", "sqrt")
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = leaf(_inputs(rng, (3, 4), positive))
        if name in ("abs", "relu"):
            x.data[np.abs(x.data) < 1e-2] += 0.1  # keep away from the kink
        weights = Tensor(rng.normal(size=op(Tensor(x.data)).shape))
        err = grad_check(lambda t: (op(t) * weights).sum(), x)
        assert err < 1e-6, (name, seed, err)


BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "matmul": lambda a, b: a @ b.T,
    "concat": lambda a, b: T.concat([a, b], axis=1),
    "stack": lambda a, b: T.stack([a, b], axis=0),
    "broadcast_add": lambda a, b: a + b[0:1],
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients_float64(name):
    op = BINARY[name]
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        a = leaf(rng.normal(size=(3, 4)))
        b = leaf(_inputs(rng, (3, 4), positive=name == "div"))
        weights = Tensor(rng.normal(size=op(Tensor(a.data), Tensor(b.data)).shape))
        err = grad_check(lambda ts: (op(*ts) * weights).sum(), [a, b])
        assert err < 1e-6, (name, seed, err)


def test_conv_gradients_float64():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        x = leaf(rng.normal(size=(1, 2, 5, 5)))
        w = leaf(rng.normal(size=(3, 2, 3, 3)))
        b = leaf(rng.normal(size=3))
        assert grad_check(lambda ts: (T.conv2d(*ts, stride=2) ** 2).sum(), [x, w, b]) < 1e-6
        xd = leaf(rng.normal(size=(4, 3, 2)))
        wd = leaf(rng.normal(size=(3, 3, 2)))
        assert grad_check(lambda ts: (T.depthwise_conv2d(*ts) ** 2).sum(), [xd, wd]) < 1e-6


def test_edge_padded_conv_gradients_float64():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        x = leaf(rng.normal(size=(2, 2, 5, 6)))
        w = leaf(rng.normal(size=(3, 2, 3, 3)))
        for stride in (1, 2):
            assert grad_check(lambda ts: (T.conv2d(*ts, stride=stride, padding="edge") ** 2).sum(), [x, w]) < 1e-6


def test_batched_input_against_matrix_float64(rng):
    # (B, T, k) @ (k, o) takes the flattened path
    a = leaf(rng.normal(size=(2, 3, 4)))
    b = leaf(rng.normal(size=(4, 5)))
    np.testing.assert_allclose((a @ b).data, np.einsum("btk,ko->bto", a.data, b.data), atol=1e-12)
    assert grad_check(lambda ts: ((ts[0] @ ts[1]) ** 2).sum(), [a, b]) < 1e-6


def test_batched_matmul_gradient_float64(rng):
    a = leaf(rng.normal(size=(2, 3, 4)))
    b = leaf(rng.normal(size=(4, 5)))
    assert grad_check(lambda ts: ((ts[0] @ ts[1]) ** 2).sum(), [a, b]) < 1e-6


def test_layer_norm_with_affine_gradient_float64(rng):
    x = leaf(rng.normal(size=(3, 5)))
    w = leaf(rng.normal(size=5))
    b = leaf(rng.normal(size=5))
    target = Tensor(rng.normal(size=(3, 5)))
    assert grad_check(lambda ts: (T.layer_norm(*ts) * target).sum(), [x, w, b]) < 1e-6


def test_layer_norm_affine_matches_composition(rng, f64):
    x = rng.normal(size=(2, 3, 5))
    w, b = rng.normal(size=5), rng.normal(size=5)
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * w + b
    np.testing.assert_allclose(T.layer_norm(Tensor(x), Tensor(w), Tensor(b)).data, ref, atol=1e-12)


def test_linear_matches_matmul_plus_bias(rng, f64):
    x, w, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
    np.testing.assert_allclose(T.linear(Tensor(x), Tensor(w), Tensor(b)).data, x @ w + b, atol=1e-12)
    np.testing.assert_allclose(T.linear(Tensor(x[0, 0]), Tensor(w)).data, x[0, 0] @ w, atol=1e-12)
    with pytest.raises(T.ShapeError, match="linear"):
        T.linear(Tensor(x), Tensor(w.T))


def test_linear_gradient_float64():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = leaf(rng.normal(size=(2, 3, 4)))
        w = leaf(rng.normal(size=(4, 5)))
        b = leaf(rng.normal(size=5))
        target = Tensor(rng.normal(size=(2, 3, 5)))
        assert grad_check(lambda ts: (T.linear(*ts) * target).sum(), [x, w, b]) < 1e-6


# ---------------------------------------------------------------- invariants

finite_rows = hnp.arrays(
    np.float64,
    hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=8),
    elements=st.floats(-50, 50, allow_nan=False),
)


@given(finite_rows)
def test_softmax_rows_sum_to_one(a):
    out = T.softmax(Tensor(a)).data
    assert np.all(out >= 0) and np.all(out <= 1)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


@given(
    hnp.arrays(
        np.float64,
        hnp.array_shapes(min_dims=2, max_dims=2, min_side=2, max_side=16),
        elements=st.floats(-100, 100, allow_nan=False),
    )
)
def test_layer_norm_moments(a):
    # rows whose spread is tiny compared to eps are dominated by eps by design
    a = a + np.arange(a.shape[1])
    out = T.layer_norm(Tensor(a)).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-5)
    var = out.var(axis=-1)
    spread = a.var(axis=-1)
    ok = spread > 1.0
    np.testing.assert_allclose(var[ok], 1.0, atol=1e-4)


@given(hnp.arrays(np.float32, st.just((2, 3, 4)), elements=st.floats(-1e3, 1e3, width=32)))
def test_reshape_permute_round_trip_bit_identical(a):
    t = Tensor(a)
    np.testing.assert_array_equal(t.reshape(4, 6).reshape(2, 3, 4).data, a)
    np.testing.assert_array_equal(t.permute(2, 0, 1).permute(1, 2, 0).data, a)
    np.testing.assert_array_equal(t.transpose(0, 2).transpose(0, 2).data, a)


def test_float32_mode_grad_check_tolerance(rng):
    x = Tensor(rng.normal(size=(3, 4)).astype(np.float32), requires_grad=True)
    assert grad_check(lambda t: (T.gelu(t) * t).sum(), x) < 1e-3


def test_dropout_is_identity_in_eval_and_scales_in_train(rng):
    x = Tensor(np.ones((200, 50)))
    assert T.dropout(x, 0.3, rng, training=False) is x
    out = T.dropout(x, 0.3, np.random.default_rng(0), training=True).data
    kept = out != 0
    np.testing.assert_allclose(out[kept], 1 / 0.7)
    assert abs(kept.mean() - 0.7) < 0.02
