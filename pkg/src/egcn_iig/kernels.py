"""Compiled loops for the memory-bound hot spots: fused batch norm + activation
and depthwise temporal convolution. Arrays are (N, C, P) or (N, C, T, V), C order."""

from __future__ import annotations

import numpy as np
from numba import njit

# reassociation lets reductions vectorize while keeping NaN/Inf semantics intact
_FAST = {"reassoc", "contract", "nsz", "arcp"}

ACT_NONE = 0
ACT_SWISH = 1


@njit(cache=True, fastmath=_FAST)
def channel_moments(x):
    """Per-channel mean and biased variance of (N, C, P), accumulated in float64."""
    n, c, p = x.shape
    count = n * p
    mean = np.empty(c)
    var = np.empty(c)
    for ci in range(c):
        s = 0.0
        for ni in range(n):
            for pi in range(p):
                s += x[ni, ci, pi]
        mu = s / count
        ss = 0.0
        for ni in range(n):
            for pi in range(p):
                d = x[ni, ci, pi] - mu
                ss += d * d
        mean[ci] = mu
        var[ci] = ss / count
    return mean, var


@njit(cache=True, fastmath=_FAST)
def norm_affine(x, scale, shift, residual, has_residual, rscale):
    """``x * scale + shift [+ rscale * residual]`` per channel."""
    n, c, p = x.shape
    out = np.empty_like(x)
    for ni in range(n):
        for ci in range(c):
            a = scale[ci]
            b = shift[ci]
            for pi in range(p):
                y = x[ni, ci, pi] * a + b
                if has_residual:
                    y += rscale * residual[ni, ci, pi]
                out[ni, ci, pi] = y
    return out


@njit(cache=True, fastmath=_FAST)
def swish_from_half(h, t):
    """In place: ``t <- h * (1 + t)`` where ``h = y / 2`` and ``t = tanh(h)``, i.e. swish(y)."""
    flat_h = h.reshape(-1)
    flat_t = t.reshape(-1)
    for i in range(flat_t.size):
        flat_t[i] = flat_h[i] * (1.0 + flat_t[i])
    return t


@njit(cache=True, fastmath=_FAST)
def norm_act_backward(g, x, h, t, act, mean, inv, gamma, training):
    """Gradients of ``act(bn(x) + r)``. For Swish, ``h`` is half the pre-activation
    and ``t = tanh(h)``. Returns (g_x, g_gamma, g_beta, g_y); g_y is the residual's."""
    n, c, p = x.shape
    count = n * p
    gx = np.empty_like(x)
    gy_all = np.empty_like(x)
    ggamma = np.empty(c)
    gbeta = np.empty(c)
    for ci in range(c):
        a = gamma[ci] * inv[ci]
        mu = mean[ci]
        iv = inv[ci]
        sg = 0.0
        sgx = 0.0
        for ni in range(n):
            for pi in range(p):
                gy = g[ni, ci, pi]
                if act == ACT_SWISH:
                    # d swish / dy = s (1 + y (1 - s)) with s = (1 + t) / 2, y = 2 h
                    tv = t[ni, ci, pi]
                    gy *= 0.5 * (1.0 + tv) * (1.0 + h[ni, ci, pi] * (1.0 - tv))
                gy_all[ni, ci, pi] = gy
                sg += gy
                sgx += gy * (x[ni, ci, pi] - mu) * iv
        gbeta[ci] = sg
        ggamma[ci] = sgx
        mg = sg / count
        mgx = sgx / count
        for ni in range(n):
            for pi in range(p):
                if training:
                    gx[ni, ci, pi] = a * (gy_all[ni, ci, pi] - mg - (x[ni, ci, pi] - mu) * iv * mgx)
                else:
                    gx[ni, ci, pi] = a * gy_all[ni, ci, pi]
    return gx, ggamma, gbeta, gy_all


@njit(cache=True, fastmath=_FAST)
def depthwise_forward(x, w, stride, pad, t_out):
    """out[n, c, t] = sum_a w[c, a] * x[n, c, t * stride + a - pad] (zero padded)."""
    n, c, t_in, v = x.shape
    k = w.shape[1]
    out = np.zeros((n, c, t_out, v), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for to in range(t_out):
                for a in range(k):
                    ti = to * stride + a - pad
                    if 0 <= ti < t_in:
                        wa = w[ci, a]
                        for vi in range(v):
                            out[ni, ci, to, vi] += wa * x[ni, ci, ti, vi]
    return out


@njit(cache=True, fastmath=_FAST)
def depthwise_backward(g, x, w, stride, pad):
    n, c, t_in, v = x.shape
    t_out = g.shape[2]
    k = w.shape[1]
    gx = np.zeros_like(x)
    gw = np.zeros((c, k))
    for ni in range(n):
        for ci in range(c):
            for to in range(t_out):
                for a in range(k):
                    ti = to * stride + a - pad
                    if 0 <= ti < t_in:
                        wa = w[ci, a]
                        acc = 0.0
                        for vi in range(v):
                            gv = g[ni, ci, to, vi]
                            gx[ni, ci, ti, vi] += wa * gv
                            acc += gv * x[ni, ci, ti, vi]
                        gw[ci, a] += acc
    return gx, gw
