import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from egcn_iig import tensor as T
from egcn_iig.gradcheck import check_layer, tiny_adjacency
from egcn_iig.layers import AdaptiveGraphConv, JointAttention, TemporalConv
from egcn_iig.tensor import ShapeError, Value


def graph_conv_loop(x, weight, adjacency):
    """out[n, o, t, i] = sum_k sum_j sum_c W_k[o, c] x[n, c, t, j] A_k[i, j] (normalization folded into A_k)."""
    n, c, t, v = x.shape
    k_count, o_count, _ = weight.shape
    out = np.zeros((n, o_count, t, v))
    for b in range(n):
        for o in range(o_count):
            for tt in range(t):
                for i in range(v):
                    acc = 0.0
                    for k in range(k_count):
                        for j in range(v):
                            if adjacency[k, i, j] == 0.0:
                                continue
                            for ci in range(c):
                                acc += adjacency[k, i, j] * x[b, ci, tt, j] * weight[k, o, ci]
                    out[b, o, tt, i] = acc
    return out


def test_fixed_graph_matches_loop_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(100):
        v = int(rng.integers(2, 6))
        c_in, c_out = (int(c) for c in rng.integers(1, 5, size=2))
        layer = AdaptiveGraphConv(c_in, c_out, tiny_adjacency(v), similarity=False, rng=rng)
        layer.weight.data = rng.normal(size=layer.weight.shape)
        x = rng.normal(size=(2, c_in, 3, v))
        got = layer.aggregate(Value(x)).data
        worst = max(worst, np.max(np.abs(got - graph_conv_loop(x, layer.weight.data, layer.adjacency))))
    assert worst <= 1e-10


def test_single_channel_two_node_case():
    adjacency = tiny_adjacency(2)
    layer = AdaptiveGraphConv(1, 1, adjacency, similarity=False)
    layer.weight.data = np.array([[[2.0]], [[-1.0]], [[0.5]]])
    x = np.array([[[[1.5, -0.5]]]])
    expect = sum(layer.weight.data[k, 0, 0] * (adjacency[k] @ x[0, 0, 0]) for k in range(3))
    np.testing.assert_allclose(layer.aggregate(Value(x)).data[0, 0, 0], expect, atol=1e-12)


def test_similarity_rows_and_uniform_case(rng):
    layer = AdaptiveGraphConv(3, 8, tiny_adjacency(5), rng=rng)
    x = Value(rng.normal(size=(2, 3, 4, 5)))
    ck = layer.similarity_matrix(x).data
    assert ck.shape == (2, 3, 5, 5)
    np.testing.assert_allclose(ck.sum(axis=-1), 1.0, atol=1e-9)
    layer.embed_a.data[:] = 0
    np.testing.assert_allclose(layer.similarity_matrix(x).data, 1 / 5, atol=1e-15)


def test_similarity_matches_matrix_oracle(rng):
    v, c, t = 3, 2, 4
    layer = AdaptiveGraphConv(c, 4, tiny_adjacency(v), rng=rng)
    e = layer.embed
    x = rng.normal(size=(1, c, t, v))
    ck = layer.similarity_matrix(Value(x)).data
    for k in range(3):
        wa = layer.embed_a.data[k * e : (k + 1) * e, :, 0, 0]
        wb = layer.embed_b.data[k * e : (k + 1) * e, :, 0, 0]
        theta = np.einsum("ec,ctv->vet", wa, x[0]).reshape(v, e * t)  # (V, C'T)
        phi = np.einsum("ec,ctv->etv", wb, x[0]).reshape(e * t, v)  # (C'T, V)
        z = theta @ phi / (e * t)
        expect = np.exp(z - z.max(axis=1, keepdims=True))
        expect /= expect.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(ck[0, k], expect, atol=1e-12)


def test_identity_pathway_without_similarity():
    v = 4
    adjacency = np.zeros((3, v, v))
    adjacency[0] = np.eye(v)
    layer = AdaptiveGraphConv(2, 2, adjacency, residual=False, similarity=False)
    layer.weight.data = np.zeros((3, 2, 2))
    layer.weight.data[0] = np.eye(2)
    layer.eval()
    x = np.random.default_rng(0).normal(size=(1, 2, 3, v))
    # inference batch norm with default statistics is x / sqrt(1 + eps)
    y = x / np.sqrt(1 + 1e-5)
    np.testing.assert_allclose(layer(Value(x)).data, y / (1 + np.exp(-y)), atol=1e-12)


def test_agc_rejects_node_mismatch(rng):
    layer = AdaptiveGraphConv(3, 4, tiny_adjacency(5), rng=rng)
    with pytest.raises(ShapeError):
        layer(Value(np.zeros((1, 3, 4, 6))))
    with pytest.raises(ValueError):
        AdaptiveGraphConv(3, 4, np.zeros((2, 5, 5)))


def test_learned_adjacency_starts_at_zero_and_is_not_decayed(rng):
    layer = AdaptiveGraphConv(3, 4, tiny_adjacency(5), rng=rng)
    assert not layer.learned.data.any() and not layer.learned.decay


@pytest.mark.parametrize("name", ["agc", "tgc", "att"])
def test_layer_gradients(name):
    assert max(r.error for r in check_layer(name)) <= 1e-4


def test_tgc_lengths_and_depthwise_params(rng):
    layer = TemporalConv(6, 8, stride=2, rng=rng)
    assert layer(Value(rng.normal(size=(1, 6, 150, 3)))).shape == (1, 8, 75, 3)
    assert layer(Value(rng.normal(size=(1, 6, 7, 3)))).shape == (1, 8, 4, 3)
    assert layer.depthwise.weight.size == 2 * 6 * 5
    assert TemporalConv(6, 8, kernel=9, rng=rng).depthwise.weight.size == 2 * 6 * 9


def test_tgc_constant_input_gives_constant_rows(rng):
    layer = TemporalConv(2, 2, stride=1, residual=False, rng=rng)
    layer.eval()
    layer.depthwise.weight.data[:] = 0.0
    layer.depthwise.weight.data[:, 0, 2, 0] = 1.0  # identity tap
    x = np.broadcast_to(rng.normal(size=(1, 2, 1, 3)), (1, 2, 9, 3)).copy()
    out = layer(Value(x)).data
    np.testing.assert_allclose(out, np.broadcast_to(out[:, :, :1], out.shape), atol=1e-12)


def test_attention_zero_gate_weights(rng):
    att = JointAttention(8, rng=rng)
    for lin in (att.spatial, att.temporal):
        lin.weight.data[:] = 0
        lin.bias.data[:] = 0
    g = rng.normal(size=(2, 8, 5, 4))
    # each gate is sigmoid(0) = 0.5, and the frame and node gates multiply
    np.testing.assert_allclose(att(Value(g)).data, 0.25 * g, atol=1e-15)


@given(seed=st.integers(0, 1000))
def test_attention_bounded_and_shape_preserving(seed):
    rng = np.random.default_rng(seed)
    att = JointAttention(8, rng=rng)
    g = rng.normal(size=(1, 8, 6, 5)) * 3
    out = att(Value(g)).data
    assert out.shape == g.shape and np.all(np.abs(out) <= np.abs(g))


def test_attention_node_permutation_equivariance(rng):
    att = JointAttention(8, rng=rng)
    g = rng.normal(size=(1, 8, 6, 5))
    perm = rng.permutation(5)
    gt, gv = att.gates(Value(g))
    gt_p, gv_p = att.gates(Value(g[..., perm]))
    np.testing.assert_allclose(gv_p.data, gv.data[..., perm], atol=1e-14)
    np.testing.assert_allclose(gt_p.data, gt.data, atol=1e-14)
    with pytest.raises(ValueError):
        JointAttention(3)


@pytest.mark.parametrize("make", [
    lambda rng: AdaptiveGraphConv(3, 4, tiny_adjacency(5), rng=rng),
    lambda rng: TemporalConv(3, 4, stride=2, rng=rng),
    lambda rng: JointAttention(4, rng=rng),
])
def test_finite_and_no_dead_parameters(rng, make):
    layer = make(rng)
    for p in layer.parameters():
        p.data = p.data + rng.normal(0, 0.1, size=p.shape)
    c = getattr(layer, "c_in", getattr(layer, "channels", None))
    out = layer(Value(rng.normal(size=(2, c, 6, 5))))
    assert np.all(np.isfinite(out.data))
    T.backward((out * rng.normal(size=out.shape)).sum())
    for name, p in layer.named_parameters():
        assert p.grad is not None and np.any(p.grad != 0), name
