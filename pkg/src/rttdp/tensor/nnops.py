"""Convolution and batch normalization with hand-written backward passes."""
from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .autograd import DTYPE, Tensor, _check_finite, _make, _state, as_tensor


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, H, W) -> (N, OH, OW, C, kh, kw)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW layout, square stride and zero padding."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {weight.shape[0]} filters")
        parents.append(bias)
    if _state.strict:
        _check_finite([p.data for p in parents], "conv2d")

    n, c, h, w = x.shape
    f, _, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    cols = _im2col(xp, kh, kw, stride)
    oh, ow = cols.shape[1], cols.shape[2]
    flat = cols.reshape(n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(f, -1)
    out = flat @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (gmat.T @ flat).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            # one transpose up front, then each kernel tap scatters a contiguous block
            gcols = np.ascontiguousarray((gmat @ wmat).reshape(n, oh, ow, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return _make(np.ascontiguousarray(out), "conv2d", parents, backward)


def _bn_axes(x: Tensor):
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise ShapeError(f"batch norm expects (N, C) or (N, C, H, W), got {x.shape}")


def batch_norm_train(x, gamma, beta, eps: float = 1e-5):
    """Normalize with the current batch's statistics.

    Gradients flow through the batch mean and (biased) variance.

    Returns:
        ``(out, batch_mean, batch_var)`` where the two statistics are plain
        arrays meant for refreshing running estimates.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes, bshape = _bn_axes(x)
    if _state.strict:
        _check_finite((x.data, gamma.data, beta.data), "batch_norm_train")
    count = int(np.prod([x.shape[a] for a in axes]))
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        gx = (inv_std.reshape(bshape) / count) * (
            count * gxhat
            - gxhat.sum(axis=axes).reshape(bshape)
            - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
        )
        return gx, ggamma, gbeta

    return _make(out, "batch_norm_train", (x, gamma, beta), backward), mu, var


def batch_norm_eval(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray, eps: float = 1e-5) -> Tensor:
    """Normalize with stored statistics; they are treated as constants."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes, bshape = _bn_axes(x)
    rm = np.asarray(running_mean, dtype=DTYPE).reshape(bshape)
    inv_std = (1.0 / np.sqrt(np.asarray(running_var, dtype=DTYPE) + eps)).reshape(bshape)
    xhat = (x.data - rm) * inv_std
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        return g * gamma.data.reshape(bshape) * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out, "batch_norm_eval", (x, gamma, beta), backward)


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    return x.mean(axis=(2, 3))


def flatten(x, start: int = 1) -> Tensor:
    x = as_tensor(x)
    return x.reshape(x.shape[:start] + (-1,))


def linear(x, weight, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    out = as_tensor(x) @ as_tensor(weight).T
    return out + bias if bias is not None else out
