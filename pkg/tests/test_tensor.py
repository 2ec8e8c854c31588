import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from egcn_iig import tensor as T
from egcn_iig.tensor import ShapeError, Value

finite = st.floats(-5, 5, allow_nan=False, width=64)


def leaf(a):
    return Value(np.asarray(a, dtype=np.float64), requires_grad=True)


# forward examples


def test_softmax_of_zero_pair_is_half():
    np.testing.assert_array_equal(T.softmax(Value([0.0, 0.0])).data, [0.5, 0.5])


def test_swish_fixed_point_at_zero():
    assert T.swish(Value([0.0])).data[0] == 0.0


def test_grouped_conv_output_length():
    x = Value(np.ones((1, 4, 16, 3)))
    w = Value(np.ones((4, 1, 5, 1)))
    assert T.conv2d(x, w, stride=(2, 1), padding=(2, 0), groups=4).shape == (1, 4, 8, 3)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(Value(np.ones((2, 3))), Value(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        Value(np.ones((2, 3))) + Value(np.ones((4,)))


def test_forward_primitive_dispatch():
    out = T.forward_primitive("mul", Value([2.0]), Value([3.0]))
    assert out.data[0] == 6.0
    with pytest.raises(ValueError):
        T.forward_primitive("nope", Value([1.0]))


def test_float32_scalars_do_not_upcast():
    x = Value(np.ones(3, dtype=np.float32))
    assert (x * 0.5 + 1.0).dtype == np.float32
    assert T.sigmoid(x).dtype == np.float32


# convolution against an explicit loop oracle


def conv_loop(x, w, stride, pad, groups):
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1])))
    ho = (h + 2 * pad[0] - kh) // stride[0] + 1
    wo = (wd + 2 * pad[1] - kw) // stride[1] + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, g * cg : (g + 1) * cg, i * stride[0] : i * stride[0] + kh, j * stride[1] : j * stride[1] + kw]
                    out[b, oc, i, j] = np.sum(patch * w[oc])
    return out


@pytest.mark.parametrize(
    "c,o,k,stride,groups",
    [(4, 6, (1, 1), (1, 1), 1), (4, 6, (1, 1), (2, 1), 1), (4, 4, (5, 1), (1, 1), 4), (4, 4, (5, 1), (2, 1), 4),
     (4, 6, (3, 3), (1, 1), 2), (3, 5, (3, 1), (2, 2), 1)],
)
def test_conv2d_matches_loop_and_gradients(rng, c, o, k, stride, groups):
    x = leaf(rng.normal(size=(2, c, 9, 4)))
    w = leaf(rng.normal(size=(o, c // groups) + k))
    pad = ((k[0] - 1) // 2, (k[1] - 1) // 2)
    out = T.conv2d(x, w, stride, pad, groups)
    np.testing.assert_allclose(out.data, conv_loop(x.data, w.data, stride, pad, groups), atol=1e-12)
    probe = rng.normal(size=out.shape)

    def f(_):
        return (T.conv2d(x, w, stride, pad, groups) * probe).sum()

    assert T.finite_diff_check(f, x) <= 1e-7
    assert T.finite_diff_check(f, w) <= 1e-7


# backward examples


def test_backward_square():
    x = leaf([3.0])
    T.backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_matmul_sum_oracle(rng):
    a, b = leaf(rng.normal(size=(2, 2))), leaf(rng.normal(size=(2, 2)))
    T.backward((a @ b).sum())
    np.testing.assert_allclose(a.grad, np.ones((2, 2)) @ b.data.T, atol=1e-14)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 2)), atol=1e-14)


def test_unused_leaf_gets_no_gradient():
    x, y = leaf([1.0, 2.0]), leaf([5.0])
    grads = T.backward((x * 2.0).sum())
    assert y not in grads and y.grad is None


def test_gradients_accumulate_over_paths():
    x = leaf([2.0])
    T.backward((x * x + x * 3.0).sum())
    np.testing.assert_allclose(x.grad, [7.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        T.backward(leaf([1.0, 2.0]) * 2.0)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == () and y._backward is None


# finite-difference oracle


def test_finite_diff_sigmoid(rng):
    x = Value(rng.uniform(-1, 1, size=8))
    assert T.finite_diff_check(lambda v: T.sigmoid(v).sum(), x) <= 1e-6


def test_finite_diff_linear_map_is_exact(rng):
    m = rng.normal(size=(5, 8))
    x = Value(rng.normal(size=8))
    assert T.finite_diff_check(lambda v: (Value(m) @ v.reshape(8, 1)).sum(), x) <= 1e-9


def test_finite_diff_rejects_nan():
    with pytest.raises(ValueError):
        T.finite_diff_check(lambda v: T.log(v).sum(), Value([-1.0]))
    with pytest.raises(ValueError):
        T.finite_diff_check(lambda v: v.sum(), Value([1.0]), eps=0.0)


UNARY = {
    "sigmoid": T.sigmoid,
    "swish": T.swish,
    "hardswish": T.hardswish,
    "softmax": lambda v: T.softmax(v, axis=1),
    "log_softmax": lambda v: T.log_softmax(v, axis=1),
    "mean": lambda v: v.mean(axis=(0, 2)),
    "l2_norm": lambda v: T.l2_norm(v, axis=1),
    "transpose": lambda v: v.transpose(2, 0, 1),
    "getitem": lambda v: v[:, 1:, ::2],
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(x=arrays(np.float64, (2, 3, 4), elements=st.floats(-2.5, 2.5, allow_nan=False, width=64)))
def test_unary_primitive_gradients(name, x):
    if name == "hardswish":
        x = np.where(np.abs(np.abs(x) - 3.0) < 1e-3, x + 0.01, x)  # keep off the kinks
    if name == "l2_norm":
        x = np.abs(x) + 0.5  # the norm is not differentiable at the zero vector
    probe = np.random.default_rng(0).normal(size=UNARY[name](Value(x)).shape)
    assert T.finite_diff_check(lambda v: (UNARY[name](v) * probe).sum(), Value(x.copy())) <= 1e-4


@given(
    a=arrays(np.float64, (3, 4), elements=finite),
    b=arrays(np.float64, (4,), elements=finite),
)
def test_binary_broadcast_gradients(a, b):
    for op in (T.add, T.sub, T.mul):
        probe = np.linspace(-1, 1, 12).reshape(3, 4)
        assert T.finite_diff_check(lambda v: (op(v, Value(b)) * probe).sum(), Value(a.copy())) <= 1e-4
        assert T.finite_diff_check(lambda v: (op(Value(a), v) * probe).sum(), Value(b.copy())) <= 1e-4


def test_linear_and_cross_entropy_gradients(rng):
    x, w, b = Value(rng.normal(size=(5, 4))), Value(rng.normal(size=(3, 4))), Value(rng.normal(size=3))
    labels = np.array([0, 2, 1, 1, 0])

    def f(_):
        return T.cross_entropy(T.linear(x, w, b), labels)

    for v in (x, w, b):
        assert T.finite_diff_check(f, v) <= 1e-6


def test_cross_entropy_value():
    logits = Value(np.log(np.array([[0.7, 0.2, 0.1]])))
    assert T.cross_entropy(logits, [0]).item() == pytest.approx(-np.log(0.7), abs=1e-12)


# batch normalization (fused with residual and Swish)


def bn_reference(x, gamma, beta, residual, swish, eps=1e-5):
    axes = (0,) + tuple(range(2, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    shape = (1, -1) + (1,) * (x.ndim - 2)
    y = (x - mu) / np.sqrt(var + eps) * gamma.reshape(shape) + beta.reshape(shape)
    if residual is not None:
        y = y + residual
    return y / (1 + np.exp(-y)) if swish else y


@pytest.mark.parametrize("with_residual", [False, True])
@pytest.mark.parametrize("activation", [None, "swish"])
@pytest.mark.parametrize("training", [False, True])
def test_norm_act_matches_reference_and_gradients(rng, with_residual, activation, training):
    x = Value(rng.normal(1.0, 2.0, size=(3, 4, 5, 2)))
    gamma, beta = Value(rng.normal(size=4)), Value(rng.normal(size=4))
    res = Value(rng.normal(size=x.shape)) if with_residual else None
    rm, rv = rng.normal(size=4), rng.uniform(0.5, 2.0, size=4)

    def run(_=None):
        return T.norm_act(x, gamma, beta, rm.copy(), rv.copy(), training, res, activation)

    if training:
        expect = bn_reference(x.data, gamma.data, beta.data, None if res is None else res.data, activation == "swish")
    else:
        y = (x.data - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
        y = y * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
        y = y + (res.data if res is not None else 0.0)
        expect = y / (1 + np.exp(-y)) if activation else y
    np.testing.assert_allclose(run().data, expect, atol=1e-12)
    probe = rng.normal(size=x.shape)
    for v in [x, gamma, beta] + ([res] if res is not None else []):
        assert T.finite_diff_check(lambda _: (run() * probe).sum(), v) <= 1e-6


def test_batch_norm_running_statistics(rng):
    x = Value(rng.normal(3.0, 2.0, size=(4, 2, 6)))
    rm, rv = np.zeros(2), np.ones(2)
    T.batch_norm(x, Value(np.ones(2)), Value(np.zeros(2)), rm, rv, True)
    data = x.data.transpose(1, 0, 2).reshape(2, -1)
    np.testing.assert_allclose(rm, 0.1 * data.mean(axis=1), atol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * data.var(axis=1, ddof=1), atol=1e-12)


@given(x=arrays(np.float64, (2, 3, 4), elements=finite))
def test_inference_batch_norm_identity(x):
    # with eps = 1e-5 the map is x / sqrt(1 + eps): identity to 1e-6 only while |x| <= 0.2
    out = T.batch_norm(Value(x), Value(np.ones(3)), Value(np.zeros(3)), np.zeros(3), np.ones(3), False).data
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-12, atol=1e-15)
    small = np.abs(x) <= 0.2
    assert np.all(np.abs(out - x)[small] <= 1e-6)


# properties


@given(x=arrays(np.float64, (3, 5), elements=st.floats(-50, 50, allow_nan=False, width=64)))
def test_softmax_rows_positive_and_normalized(x):
    s = T.softmax(Value(x), axis=1).data
    assert np.all(s > 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)


@given(
    a=arrays(np.float64, (2, 3), elements=finite),
    b=arrays(np.float64, (2, 4), elements=finite),
)
def test_concat_then_split_is_exact(a, b):
    pa, pb = T.split(T.concat([Value(a), Value(b)], axis=1), [3, 4], axis=1)
    assert np.array_equal(pa.data, a) and np.array_equal(pb.data, b)


@given(x=arrays(np.float64, (4,), elements=finite))
def test_value_shape_invariant(x):
    v = Value(x).reshape(2, 2)
    assert np.prod(v.shape) == v.data.size and all(s > 0 for s in v.shape)
