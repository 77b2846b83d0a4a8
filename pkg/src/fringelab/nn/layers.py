"""Layer kernels on ``(H, W, C)`` tensors with explicit backward passes.

Every forward returns ``(y, cache)``; the matching backward takes the cache
and the upstream gradient and returns the input gradient (plus parameter
gradients where the layer has parameters).  Kernels work in whatever float
dtype they are given, so a float64 build is available for gradient checks.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


# -- 3x3 convolution, stride 1, zero padding 1 -------------------------------------


def im2col(x):
    """``(H, W, C)`` -> ``(H*W, 9*C)`` patches, ordered (dy, dx, c)."""
    h, w, c = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))  # (H, W, C, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, 9 * c)


def col2im(cols, shape):
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to ``(H, W, C)``."""
    h, w, c = shape
    g = cols.reshape(h, w, 3, 3, c)
    xp = np.zeros((h + 2, w + 2, c), dtype=cols.dtype)
    for dy in range(3):
        for dx in range(3):
            xp[dy : dy + h, dx : dx + w] += g[:, :, dy, dx]
    return xp[1:-1, 1:-1]


def conv_forward(x, w, b):
    """``w`` has shape ``(3, 3, C_in, C_out)``; ``b`` shape ``(C_out,)``."""
    h, wd, cin = x.shape
    if w.shape[:3] != (3, 3, cin):
        raise ValueError(f"conv expects {w.shape[2]} input channels, got {cin}")
    cols = im2col(x)
    y = cols @ w.reshape(9 * cin, -1) + b
    return y.reshape(h, wd, -1), (cols, x.shape, w)


def conv_backward(dy, cache):
    cols, shape, w = cache
    cout = w.shape[-1]
    g = dy.reshape(-1, cout)
    dw = (cols.T @ g).reshape(w.shape)
    db = g.sum(axis=0)
    dx = col2im(g @ w.reshape(-1, cout).T, shape)
    return dx, dw, db


# -- activations and plumbing ------------------------------------------------------


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, cache):
    return dy * cache


def maxpool_forward(x, f: int):
    """Non-overlapping ``f x f`` max pooling; ties route to the first maximum."""
    if f == 1:
        return x, None
    h, w, c = x.shape
    if h % f or w % f:
        raise ValueError(f"pool factor {f} does not divide {h}x{w}")
    blocks = x.reshape(h // f, f, w // f, f, c).transpose(0, 2, 4, 1, 3).reshape(h // f, w // f, c, f * f)
    arg = np.argmax(blocks, axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return y, (arg, x.shape, f)


def maxpool_backward(dy, cache):
    if cache is None:
        return dy
    arg, shape, f = cache
    h, w, c = shape
    g = np.zeros((h // f, w // f, c, f * f), dtype=dy.dtype)
    np.put_along_axis(g, arg[..., None], dy[..., None], axis=-1)
    return g.reshape(h // f, w // f, c, f, f).transpose(0, 3, 1, 4, 2).reshape(h, w, c)


def upsample_forward(x, f: int):
    """Nearest-neighbour resize by an integer factor."""
    if f == 1:
        return x, None
    return np.repeat(np.repeat(x, f, axis=0), f, axis=1), f


def upsample_backward(dy, cache):
    if cache is None:
        return dy
    f = cache
    h, w, c = dy.shape
    return dy.reshape(h // f, f, w // f, f, c).sum(axis=(1, 3))


def add_forward(a, b):
    return a + b, None


def add_backward(dy, cache):
    return dy, dy


def concat_forward(xs):
    return np.concatenate(xs, axis=-1), [x.shape[-1] for x in xs]


def concat_backward(dy, cache):
    splits = np.cumsum(cache)[:-1]
    return np.split(dy, splits, axis=-1)


# -- loss ------------------------------------------------------------------------------


def mse_forward(y, target, mask=None):
    """Mean of ``(y - target)^2`` over masked pixels and all channels."""
    if mask is None:
        mask = np.ones(y.shape[:2], dtype=bool)
    n = int(mask.sum()) * y.shape[-1]
    if n == 0:
        raise ValueError("no supervised pixels")
    diff = np.where(mask[..., None], y - target, 0).astype(y.dtype)
    return float(np.sum(diff * diff) / n), (diff, n)


def mse_backward(cache, scale: float = 1.0):
    diff, n = cache
    return (2.0 * scale / n) * diff
