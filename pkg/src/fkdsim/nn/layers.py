"""Forward/backward kernels for the six layer kinds. Activations are NHWC float64.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes ``(dout, cache)`` and returns ``dx`` plus a dict of parameter grads.
"""
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pads(size, window, stride, padding):
    if padding == "same":
        out = math.ceil(size / stride)
        total = max((out - 1) * stride + window - size, 0)
        return out, total // 2, total - total // 2
    return (size - window) // stride + 1, 0, 0


def _windows(xp, window, stride, ho, wo):
    # (N, Ho, Wo, C, k, k) strided view; no copy.
    view = sliding_window_view(xp, (window, window), axis=(1, 2))
    return view[:, : stride * ho : stride, : stride * wo : stride]


def conv2d_forward(x, kernel, bias, stride, padding):
    n, h, w, c = x.shape
    k = kernel.shape[0]
    ho, top, bottom = _pads(h, k, stride, padding)
    wo, left, right = _pads(w, k, stride, padding)
    xp = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
    win = _windows(xp, k, stride, ho, wo)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    out = cols @ kernel.reshape(k * k * c, -1) + bias
    cache = (cols, x.shape, xp.shape, (top, left), kernel, stride)
    return out.reshape(n, ho, wo, -1), cache


def conv2d_backward(dout, cache):
    cols, xshape, xpshape, (top, left), kernel, stride = cache
    n, ho, wo, cout = dout.shape
    k, _, c, _ = kernel.shape
    d2 = dout.reshape(-1, cout)
    grads = {
        "kernel": (cols.T @ d2).reshape(kernel.shape),
        "bias": d2.sum(axis=0),
    }
    dcols = (d2 @ kernel.reshape(k * k * c, cout).T).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros(xpshape)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
    h, w = xshape[1], xshape[2]
    return dxp[:, top : top + h, left : left + w, :], grads


def batchnorm_forward(x, gamma, beta, mean, var, eps):
    """Normalize over every axis but the last, with the given statistics."""
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma)


def batchnorm_backward(dout, cache, batch_stats):
    xhat, inv_std, gamma = cache
    c = dout.shape[-1]
    d2, x2 = dout.reshape(-1, c), xhat.reshape(-1, c)
    dgamma = np.einsum("ij,ij->j", d2, x2)
    dbeta = d2.sum(axis=0)
    grads = {"gamma": dgamma, "beta": dbeta}
    if not batch_stats:
        return dout * (gamma * inv_std), grads
    # Batch-statistics gradient, using sum(dxhat) = gamma*dbeta and
    # sum(dxhat*xhat) = gamma*dgamma.
    m = d2.shape[0]
    dx = (gamma * inv_std / m) * (m * dout - dbeta - xhat * dgamma)
    return dx, grads


def leaky_relu_forward(x, slope):
    mask = x > 0
    return np.where(mask, x, slope * x), (mask, slope)


def leaky_relu_backward(dout, cache):
    mask, slope = cache
    return np.where(mask, dout, slope * dout), {}


def _pool_slices(window, stride, ho, wo):
    for i in range(window):
        for j in range(window):
            yield (slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride), slice(None))


def maxpool2d_forward(x, window, stride, padding):
    n, h, w, c = x.shape
    ho, top, bottom = _pads(h, window, stride, padding)
    wo, left, right = _pads(w, window, stride, padding)
    xp = x
    if top or bottom or left or right:
        xp = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)), constant_values=-np.inf)
    out = None
    for sl in _pool_slices(window, stride, ho, wo):
        out = xp[sl].copy() if out is None else np.maximum(out, xp[sl], out=out)
    return out, (xp, out, x.shape, (top, left), window, stride)


def maxpool2d_backward(dout, cache):
    xp, out, xshape, (top, left), window, stride = cache
    _, ho, wo, _ = dout.shape
    dxp = np.zeros(xp.shape)
    # Route each gradient to the first window position holding the max.
    pending = np.ones(out.shape, dtype=bool)
    for sl in _pool_slices(window, stride, ho, wo):
        hit = pending & (xp[sl] == out)
        dxp[sl] += np.where(hit, dout, 0.0)
        pending &= ~hit
    h, w = xshape[1], xshape[2]
    return dxp[:, top : top + h, left : left + w, :], {}


def global_avg_pool_forward(x):
    return x.mean(axis=(1, 2)), x.shape


def global_avg_pool_backward(dout, xshape):
    _, h, w, _ = xshape
    return np.broadcast_to(dout[:, None, None, :] / (h * w), xshape).copy(), {}


def dense_forward(x, kernel, bias):
    return x @ kernel + bias, (x, kernel)


def dense_backward(dout, cache):
    x, kernel = cache
    return dout @ kernel.T, {"kernel": x.T @ dout, "bias": dout.sum(axis=0)}
