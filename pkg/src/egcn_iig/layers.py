"""Adaptive graph convolution, factorized temporal convolution and joint attention.

Feature maps are (N, C, T, V). Each layer also reports its own cost through
``cost(shape) -> (out_shape, Counter)`` where the counter holds FLOPs per
category, one multiply-accumulate counted as one FLOP and one FLOP per output
element for normalization, activations and elementwise arithmetic.
"""

from __future__ import annotations

from collections import Counter

import numpy as np

from . import tensor as T
from .nn import BatchNorm, Conv2d, Linear, Module, Parameter, _uniform
from .tensor import Value

KERNELS = 3


class Residual(Module):
    """Identity, or a strided 1x1 convolution + batch norm when the shape changes."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1, rng=None):
        self.stride = stride
        self.identity = c_in == c_out and stride == 1
        if not self.identity:
            self.conv = Conv2d(c_in, c_out, (1, 1), (stride, 1), rng=rng)
            self.bn = BatchNorm(c_out)
        self.c_out = c_out

    def forward(self, x: Value) -> Value:
        return x if self.identity else self.bn(self.conv(x))

    def cost(self, shape) -> Counter:
        if self.identity:
            return Counter()
        n, c, t, v = shape
        out = n * self.c_out * (-(-t // self.stride)) * v
        return Counter(conv=out * c, elementwise=out)


class AdaptiveGraphConv(Module):
    """Graph convolution over three spatial kernels with fixed, learned and
    input-dependent adjacency: ``sum_k W_k x (A_k + B_k + C_k)`` then BN, skip, Swish.

    Aggregation at node ``i`` sums ``M[i, j] * x[..., j]`` over source nodes ``j``.
    ``C_k`` is a row-softmax over source nodes of the embedded feature product,
    scaled by the embedding length. The adjacency is applied on whichever side
    of the 1x1 convolution has fewer channels.
    """

    _buffer_names = ("adjacency",)

    def __init__(
        self,
        c_in: int,
        c_out: int,
        adjacency: np.ndarray,
        residual: bool = True,
        similarity: bool = True,
        embed_channels: int | None = None,
        rng=None,
    ):
        rng = rng or np.random.default_rng(0)
        adjacency = np.asarray(adjacency, dtype=np.float64)
        if adjacency.ndim != 3 or adjacency.shape[0] != KERNELS or adjacency.shape[1] != adjacency.shape[2]:
            raise ValueError(f"adjacency must be ({KERNELS}, V, V), got {adjacency.shape}")
        self.c_in, self.c_out = c_in, c_out
        self.nodes = adjacency.shape[1]
        self.adjacency = adjacency.copy()
        self.similarity = similarity
        self.embed = embed_channels or max(1, c_out // 4)
        self.weight = Parameter(_uniform(rng, (KERNELS, c_out, c_in), c_in * KERNELS))
        self.learned = Parameter(np.zeros((KERNELS, self.nodes, self.nodes)), decay=False)
        if similarity:
            self.embed_a = Parameter(_uniform(rng, (KERNELS * self.embed, c_in, 1, 1), c_in))
            self.embed_b = Parameter(_uniform(rng, (KERNELS * self.embed, c_in, 1, 1), c_in))
        self.bn = BatchNorm(c_out)
        self.residual = Residual(c_in, c_out, rng=rng) if residual else None

    @property
    def adjacency_first(self) -> bool:
        return self.c_in <= self.c_out

    def _check(self, x: Value) -> None:
        if x.ndim != 4 or x.shape[1] != self.c_in or x.shape[3] != self.nodes:
            raise T.ShapeError(
                f"AdaptiveGraphConv: expected (N, {self.c_in}, T, {self.nodes}), got {x.shape}"
            )

    def similarity_matrix(self, x: Value) -> Value:
        """Per-sample ``C_k`` of shape (N, K, V, V); every row sums to one."""
        self._check(x)
        n, _, t, v = x.shape
        e = self.embed
        a = T.conv2d(x, self.embed_a).reshape(n, KERNELS, e, t, v)
        b = T.conv2d(x, self.embed_b).reshape(n, KERNELS, e * t, v)
        theta = a.transpose(0, 1, 4, 2, 3).reshape(n, KERNELS, v, e * t)
        return T.softmax((theta @ b) * (1.0 / (e * t)), axis=-1)

    def graph_matrices(self, x: Value) -> Value:
        """``A_k + B_k (+ C_k)``: (K, V, V), or (N, K, V, V) with the similarity term."""
        m = Value(self.adjacency.astype(self.learned.dtype, copy=False)) + self.learned
        if self.similarity:
            m = self.similarity_matrix(x) + m
        return m

    def aggregate(self, x: Value) -> Value:
        """The graph convolution before normalization and activation."""
        self._check(x)
        n, c, t, v = x.shape
        mt = T.swap_last(self.graph_matrices(x))
        if self.adjacency_first:
            y = x.reshape(n, 1, c * t, v) @ mt
            w = self.weight.transpose(1, 0, 2).reshape(self.c_out, KERNELS * c, 1, 1)
            return T.conv2d(y.reshape(n, KERNELS * c, t, v), w)
        z = T.conv2d(x, self.weight.reshape(KERNELS * self.c_out, c, 1, 1))
        y = z.reshape(n, KERNELS, self.c_out * t, v) @ mt
        return y.sum(axis=1).reshape(n, self.c_out, t, v)

    def forward(self, x: Value) -> Value:
        res = self.residual(x) if self.residual is not None else None
        return self.bn(self.aggregate(x), res, "swish")

    def cost(self, shape):
        n, c, t, v = shape
        out = n * self.c_out * t * v
        k = KERNELS
        flops = Counter()
        flops["conv"] += n * t * v * k * c * self.c_out
        flops["graph"] += n * k * min(c, self.c_out) * t * v * v
        if not self.adjacency_first:
            flops["elementwise"] += (k - 1) * out
        if self.similarity:
            flops["similarity"] += n * t * v * c * 2 * k * self.embed  # embeddings
            flops["similarity"] += n * k * v * v * self.embed * t  # node-by-node product
            flops["similarity"] += 3 * n * k * v * v  # scale, softmax, add
        flops["elementwise"] += 2 * out  # batch norm, swish
        if self.residual is not None:
            flops += self.residual.cost(shape)
            flops["elementwise"] += out
        return (n, self.c_out, t, v), flops


class TemporalConv(Module):
    """Expand (1x1, C -> 2C), depthwise temporal (k x 1, stride s), project (1x1, 2C -> C_out)."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1, kernel: int = 5, residual: bool = True, expand: int = 2, rng=None):
        rng = rng or np.random.default_rng(0)
        if kernel % 2 != 1:
            raise ValueError("temporal kernel must be odd")
        inner = expand * c_in
        self.c_in, self.c_out, self.stride, self.kernel, self.inner = c_in, c_out, stride, kernel, inner
        self.expand = Conv2d(c_in, inner, rng=rng)
        self.bn_expand = BatchNorm(inner)
        self.depthwise = Conv2d(inner, inner, (kernel, 1), (stride, 1), groups=inner, rng=rng)
        self.bn_depthwise = BatchNorm(inner)
        self.project = Conv2d(inner, c_out, rng=rng)
        self.bn_project = BatchNorm(c_out)
        self.residual = Residual(c_in, c_out, stride, rng=rng) if residual else None

    def forward(self, x: Value) -> Value:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise T.ShapeError(f"TemporalConv: expected (N, {self.c_in}, T, V), got {x.shape}")
        h = self.bn_expand(self.expand(x), activation="swish")
        h = self.bn_depthwise(self.depthwise(h), activation="swish")
        res = self.residual(x) if self.residual is not None else None
        return self.bn_project(self.project(h), res, "swish")

    def cost(self, shape):
        n, c, t, v = shape
        t2 = -(-t // self.stride)
        wide, wide2, out = n * self.inner * t * v, n * self.inner * t2 * v, n * self.c_out * t2 * v
        flops = Counter(
            conv=wide * c + wide2 * self.kernel + out * self.inner,
            elementwise=2 * wide + 2 * wide2 + out,
        )
        if self.residual is not None:
            flops += self.residual.cost(shape)
            flops["elementwise"] += out
        flops["elementwise"] += out
        return (n, self.c_out, t2, v), flops


class JointAttention(Module):
    """Joint spatial-temporal gating.

    Frame descriptors (mean over nodes) and node descriptors (mean over frames)
    share one bottleneck ``W`` with HardSwish; ``W_t`` and ``W_s`` then give
    sigmoid gates over frames and nodes, whose outer product scales the input.
    """

    def __init__(self, channels: int, rng=None):
        rng = rng or np.random.default_rng(0)
        if channels < 4:
            raise ValueError("attention needs at least 4 channels")
        self.channels = channels
        self.inner = channels // 4
        self.reduce = Linear(channels, self.inner, rng=rng)
        self.spatial = Linear(self.inner, channels, rng=rng)
        self.temporal = Linear(self.inner, channels, rng=rng)

    def gates(self, g: Value) -> tuple[Value, Value]:
        """Temporal gate (N, C, T, 1) and spatial gate (N, C, 1, V)."""
        if g.ndim != 4 or g.shape[1] != self.channels:
            raise T.ShapeError(f"JointAttention: expected (N, {self.channels}, T, V), got {g.shape}")
        n, c, t, v = g.shape
        pooled = T.concat([g.mean(axis=3), g.mean(axis=2)], axis=2)  # (N, C, T+V)
        h = T.hardswish(self.reduce(pooled.transpose(0, 2, 1)))
        ht, hv = T.split(h, [t, v], axis=1)
        gate_t = T.sigmoid(self.temporal(ht)).transpose(0, 2, 1).reshape(n, c, t, 1)
        gate_v = T.sigmoid(self.spatial(hv)).transpose(0, 2, 1).reshape(n, c, 1, v)
        return gate_t, gate_v

    def forward(self, g: Value) -> Value:
        gate_t, gate_v = self.gates(g)
        return g * (gate_t * gate_v)

    def cost(self, shape):
        n, c, t, v = shape
        full = n * c * t * v
        flops = Counter(
            attention=2 * n * (t + v) * c * self.inner,  # bottleneck and both gates
            elementwise=2 * full + n * (t + v) * (self.inner + c) + 2 * full,  # pools, activations, gating
        )
        return shape, flops
