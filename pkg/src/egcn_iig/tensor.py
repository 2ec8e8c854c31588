"""Dense arrays with a recorded graph for reverse-mode differentiation.

A :class:`Value` wraps a numpy array. Every primitive in this module returns a
new ``Value``; when any input requires a gradient, the output keeps references
to its parents and a closure that maps the output gradient to parent
gradients. :func:`backward` walks that graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels as K

__all__ = [
    "Value",
    "ShapeError",
    "backward",
    "no_grad",
    "finite_diff_check",
    "forward_primitive",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    """Incompatible operand shapes for a primitive."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Value:
    """A dense array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Value, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Value":
        return Value(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Value(shape={self.shape}, op={self.op!r}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Value):
            raise TypeError("division is only defined by a constant")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def _as_value(x, like: Value | None = None) -> Value:
    """Wrap constants; plain scalars take the dtype of ``like`` so they never upcast."""
    if isinstance(x, Value):
        return x
    dtype = like.dtype if like is not None and np.ndim(x) == 0 else np.float64
    return Value(np.asarray(x, dtype=dtype))


def _operands(a, b) -> tuple[Value, Value]:
    if isinstance(a, Value):
        return a, _as_value(b, a)
    b = _as_value(b)
    return _as_value(a, b), b


def _node(data: np.ndarray, parents: Iterable[Value], fn, op: str) -> Value:
    parents = tuple(parents)
    out = Value(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Value, b: Value) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise arithmetic


def add(a, b) -> Value:
    a, b = _operands(a, b)
    _broadcast_shape("add", a, b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Value:
    a, b = _operands(a, b)
    _broadcast_shape("sub", a, b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Value:
    a, b = _operands(a, b)
    _broadcast_shape("mul", a, b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def exp(x: Value) -> Value:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Value) -> Value:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Value) -> Value:
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g * 0.5 / np.where(out > 0, out, np.inf),), "sqrt")


# shape manipulation


def reshape(x: Value, shape) -> Value:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Value, axes=None) -> Value:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Value) -> Value:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x: Value, index) -> Value:
    out = x.data[index]
    basic = _is_basic_index(index)

    def fn(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, copy=True), (x,), fn, "getitem")


def concat(values: Sequence[Value], axis: int = 0) -> Value:
    values = [_as_value(v) for v in values]
    if not values:
        raise ShapeError("concat: no operands")
    ref = values[0].shape
    ax = axis % len(ref)
    for v in values[1:]:
        if len(v.shape) != len(ref) or any(
            v.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref} and {v.shape} differ off axis {axis}")
    sizes = [v.shape[ax] for v in values]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(values))
        )

    return _node(np.concatenate([v.data for v in values], axis=ax), values, fn, "concat")


def split(x: Value, sizes: Sequence[int], axis: int = 0) -> list[Value]:
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to axis length {x.shape[ax]} of {x.shape}")
    out, start = [], 0
    for n in sizes:
        index = [slice(None)] * x.ndim
        index[ax] = slice(start, start + n)
        out.append(getitem(x, tuple(index)))
        start += n
    return out


# reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x: Value, axis=None, keepdims: bool = False) -> Value:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _node(np.asarray(out), (x,), fn, "sum")


def mean(x: Value, axis=None, keepdims: bool = False) -> Value:
    """Mean over ``axis`` (the pooling primitive)."""
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _node(np.asarray(out), (x,), fn, "mean")


# linear algebra


def matmul(a: Value, b: Value) -> Value:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_value(a), _as_value(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(np.matmul(a.data, b.data), (a, b), fn, "matmul")


def linear(x: Value, weight: Value, bias: Value | None = None) -> Value:
    """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        g2 = g.reshape(-1, weight.shape[0])
        grads = [(g2 @ weight.data).reshape(x.shape), g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _node(out.reshape(lead + (weight.shape[0],)), parents, fn, "linear")


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x: Value, weight: Value, stride=1, padding=0, groups: int = 1) -> Value:
    """Batched 2-D cross-correlation with channel groups.

    ``x`` is (N, C, H, W) and ``weight`` is (O, C // groups, kh, kw). Computed as a
    sum over kernel taps of grouped pointwise products, which keeps the
    frequent 1x1 and depthwise (k x 1) cases cheap.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-axis input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c % groups or o % groups or cg != c // groups:
        raise ShapeError(
            f"conv2d: input {x.shape} incompatible with weight {weight.shape} for groups={groups}"
        )
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape[2:]} larger than padded input {x.shape}")
    og = o // groups
    if cg == 1 and og == 1 and kw == 1 and pw == 0 and sw == 1:
        return _depthwise_temporal(x, weight, sh, ph, ho)
    if groups == 1 and kh == 1 and kw == 1 and ph == 0 and pw == 0:
        return _pointwise(x, weight, sh, sw)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    depthwise = cg == 1 and og == 1
    wd = weight.data

    def tap(a: int, b: int) -> np.ndarray:
        return xp[:, :, a : a + sh * (ho - 1) + 1 : sh, b : b + sw * (wo - 1) + 1 : sw]

    out = np.zeros((n, o, ho, wo), dtype=np.result_type(x.data, wd))
    for a in range(kh):
        for b in range(kw):
            xs = tap(a, b)
            if depthwise:
                out += wd[:, 0, a, b][None, :, None, None] * xs
            elif groups == 1:
                out += np.matmul(wd[:, :, a, b], xs.reshape(n, c, ho * wo)).reshape(n, o, ho, wo)
            else:
                xg = xs.reshape(n, groups, cg, ho * wo)
                wg = wd[:, :, a, b].reshape(groups, og, cg)
                out += np.matmul(wg, xg).reshape(n, o, ho, wo)

    def fn(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for a in range(kh):
            for b in range(kw):
                xs = tap(a, b)
                sl = (slice(None), slice(None), slice(a, a + sh * (ho - 1) + 1, sh), slice(b, b + sw * (wo - 1) + 1, sw))
                if depthwise:
                    gw[:, 0, a, b] = np.einsum("nchw,nchw->c", g, xs)
                    gx[sl] += wd[:, 0, a, b][None, :, None, None] * g
                elif groups == 1:
                    g2 = g.reshape(n, o, ho * wo)
                    x2 = xs.reshape(n, c, ho * wo)
                    gw[:, :, a, b] = np.tensordot(g2, x2, axes=([0, 2], [0, 2]))
                    gx[sl] += np.matmul(wd[:, :, a, b].T, g2).reshape(n, c, ho, wo)
                else:
                    g2 = g.reshape(n, groups, og, ho * wo)
                    x2 = xs.reshape(n, groups, cg, ho * wo)
                    gw[:, :, a, b] = np.einsum("ngop,ngcp->goc", g2, x2).reshape(o, cg)
                    wg = wd[:, :, a, b].reshape(groups, og, cg)
                    gx[sl] += np.matmul(np.swapaxes(wg, -1, -2), g2).reshape(n, c, ho, wo)
        if ph or pw:
            gx = gx[:, :, ph : ph + h, pw : pw + w]
        return gx, gw

    return _node(out, (x, weight), fn, "conv2d")


def _pointwise(x: Value, weight: Value, sh: int, sw: int) -> Value:
    n, c = x.shape[:2]
    xs = x.data[:, :, ::sh, ::sw] if sh > 1 or sw > 1 else x.data
    ho, wo = xs.shape[2:]
    x3 = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
    w2 = weight.data[:, :, 0, 0]
    out = np.matmul(w2, x3)

    def fn(g):
        g3 = g.reshape(n, -1, ho * wo)
        gw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gx = np.matmul(w2.T, g3).reshape(n, c, ho, wo)
        if sh > 1 or sw > 1:
            full = np.zeros_like(x.data)
            full[:, :, ::sh, ::sw] = gx
            gx = full
        return gx, gw

    return _node(out.reshape(n, -1, ho, wo), (x, weight), fn, "conv2d")


def _depthwise_temporal(x: Value, weight: Value, stride: int, pad: int, t_out: int) -> Value:
    xc = np.ascontiguousarray(x.data)
    w2 = np.ascontiguousarray(weight.data[:, 0, :, 0])
    out = K.depthwise_forward(xc, w2, stride, pad, t_out)

    def fn(g):
        gx, gw = K.depthwise_backward(np.ascontiguousarray(g, dtype=xc.dtype), xc, w2, stride, pad)
        return gx, gw.astype(weight.dtype).reshape(weight.shape)

    return _node(out, (x, weight), fn, "conv2d")


# activations


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for large |z|
    out = np.tanh(z * 0.5)
    out += 1.0
    out *= 0.5
    return out


def sigmoid(x: Value) -> Value:
    s = _sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def swish(x: Value) -> Value:
    s = _sigmoid(x.data)
    out = x.data * s
    return _node(out, (x,), lambda g: (g * (s + out * (1.0 - s)),), "swish")


def hardswish(x: Value) -> Value:
    z = x.data
    out = z * np.clip(z + 3.0, 0.0, 6.0) / 6.0

    def fn(g):
        d = np.where(z < -3.0, 0.0, np.where(z > 3.0, 1.0, (2.0 * z + 3.0) / 6.0))
        return (g * d,)

    return _node(out, (x,), fn, "hardswish")


def relu(x: Value) -> Value:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def softmax(x: Value, axis: int = -1) -> Value:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), fn, "softmax")


def log_softmax(x: Value, axis: int = -1) -> Value:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def fn(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), fn, "log_softmax")


def l2_norm(x: Value, axis: int = 1, keepdims: bool = False) -> Value:
    """Euclidean norm over ``axis`` (the channel axis by default)."""
    nrm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    out = nrm if keepdims else np.squeeze(nrm, axis=axis)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(nrm > 0, nrm, 1.0)
        return (np.where(nrm > 0, g * x.data / safe, 0.0),)

    return _node(out, (x,), fn, "l2_norm")


# normalization and losses


def batch_norm(
    x: Value,
    gamma: Value,
    beta: Value,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Value:
    """Per-channel normalization over every axis except axis 1.

    In training mode the batch statistics are used and the running buffers are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``
    (unbiased batch variance).
    """
    return norm_act(x, gamma, beta, running_mean, running_var, training, momentum=momentum, eps=eps)


def norm_act(
    x: Value,
    gamma: Value,
    beta: Value,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    residual: Value | None = None,
    activation: str | None = None,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Value:
    """``activation(batch_norm(x) + residual)`` as one node."""
    if x.ndim < 2:
        raise ShapeError(f"batch_norm: input needs a channel axis, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine shapes {gamma.shape}/{beta.shape} do not match input {x.shape}")
    if residual is not None and residual.shape != x.shape:
        raise ShapeError(f"batch_norm: residual {residual.shape} does not match input {x.shape}")
    if activation not in (None, "swish"):
        raise ValueError(f"unsupported activation {activation!r}")
    act = K.ACT_SWISH if activation == "swish" else K.ACT_NONE
    n = x.shape[0]
    x3 = np.ascontiguousarray(x.data).reshape(n, c, -1)
    count = x3.shape[0] * x3.shape[2]
    if training:
        mu, var = K.channel_moments(x3)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (count / max(count - 1, 1))
    else:
        mu, var = running_mean.astype(np.float64), running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    g64, b64 = gamma.data.astype(np.float64), beta.data.astype(np.float64)
    scale = g64 * inv
    shift = b64 - mu * scale
    r3 = np.ascontiguousarray(residual.data, dtype=x.dtype).reshape(x3.shape) if residual is not None else x3[:0]
    has_res = residual is not None
    # with Swish, work with h = y / 2 so that swish(y) = h * (1 + tanh(h))
    half = 0.5 if act == K.ACT_SWISH else 1.0
    out = K.norm_affine(x3, scale * half, shift * half, r3, has_res, half)
    if act == K.ACT_SWISH:
        out = K.swish_from_half(out, np.tanh(out))
    parents = (x, gamma, beta) if residual is None else (x, gamma, beta, residual)

    def fn(g):
        # the pre-activation is recomputed rather than kept alive
        if act == K.ACT_SWISH:
            h = K.norm_affine(x3, scale * half, shift * half, r3, has_res, half)
            t = np.tanh(h)
        else:
            h = t = x3[:0]
        g3 = np.ascontiguousarray(g, dtype=x.dtype).reshape(x3.shape)
        gx, gg, gb, gy = K.norm_act_backward(g3, x3, h, t, act, mu, inv, g64, training)
        grads = [gx.reshape(x.shape), gg.astype(gamma.dtype), gb.astype(beta.dtype)]
        if residual is not None:
            grads.append(gy.reshape(x.shape))
        return grads

    return _node(out.reshape(x.shape), parents, fn, "batch_norm" if residual is None and act == K.ACT_NONE else "norm_act")


def cross_entropy(logits: Value, labels) -> Value:
    """Mean cross-entropy of (N, K) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} incompatible with labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: labels outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = (lse - z[np.arange(n), labels]).mean()
    p = np.exp(z - lse[:, None])

    def fn(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), fn, "cross_entropy")


# reverse pass


def _topo_order(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Value, accumulate: bool = True) -> dict[Value, np.ndarray]:
    """Propagate d(loss)/d(.) to every leaf that requires a gradient.

    Returns a map from leaf to gradient. With ``accumulate`` the gradients are
    also added into each leaf's ``.grad``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    leaves: dict[Value, np.ndarray] = {}
    if not loss.requires_grad:
        return leaves
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g if node not in leaves else leaves[node] + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"{node.op}: backward produced {pg.shape} for parent {parent.shape}")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    leaves = {leaf: np.array(g, dtype=leaf.dtype) for leaf, g in leaves.items()}
    if accumulate:
        for leaf, g in leaves.items():
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves


def finite_diff_check(f: Callable[[Value], Value], x: Value, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f`` maps ``x`` to a scalar. ``x.data`` is perturbed in place and restored,
    so ``f`` may also close over ``x`` (e.g. a layer parameter). The error per
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    was = x.requires_grad
    x.requires_grad = True
    try:
        y = f(x)
        if not np.all(np.isfinite(y.data)):
            raise ValueError("finite_diff_check: f(x) is not finite")
        analytic = backward(y, accumulate=False).get(x)
        if analytic is None:
            analytic = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        numeric = np.empty(flat.size)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(x).item()
                flat[i] = orig - eps
                fm = f(x).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise ValueError("finite_diff_check: f is not finite near x")
                numeric[i] = (fp - fm) / (2 * eps)
    finally:
        x.requires_grad = was
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a)))) if a.size else 0.0


PRIMITIVES: dict[str, Callable[..., Value]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "concat": concat,
    "mean": mean,
    "sum": sum_,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "sigmoid": sigmoid,
    "swish": swish,
    "hardswish": hardswish,
    "relu": relu,
    "batch_norm": batch_norm,
    "norm_act": norm_act,
    "linear": linear,
    "l2_norm": l2_norm,
    "cross_entropy": cross_entropy,
    "reshape": reshape,
    "transpose": transpose,
    "exp": exp,
    "log": log,
}


def forward_primitive(kind: str, *inputs, **params) -> Value:
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **params)
