"""Minimal channels-last numpy layers with explicit reverse-mode gradients.

Every ``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
consumes ``(grad_output, cache)``. Tensors are float64, images are ``(B, H, W, C)``,
3x3 kernels are ``(3, 3, C_in, C_out)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, x


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, x2.T @ dy2, dy2.sum(axis=0)


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


def _im2col(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))      # (B, H, W, C, 3, 3)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, 9 * c)


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-size 3x3 convolution with zero padding."""
    bsz, h, wd, _ = x.shape
    cols = _im2col(x)
    y = cols @ w.reshape(-1, w.shape[-1]) + b
    return y.reshape(bsz, h, wd, w.shape[-1]), (x.shape, cols)


def conv3x3_backward(dy: np.ndarray, cache, w: np.ndarray):
    xshape, cols = cache
    bsz, h, wd, c = xshape
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = (cols.T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    # the input gradient of a same-padded correlation is a correlation of dy
    # with the spatially flipped kernel, input/output channels swapped
    w_flip = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
    dx = (_im2col(dy) @ w_flip.reshape(-1, c)).reshape(bsz, h, wd, c)
    return dx, dw, db


def avgpool2_forward(x: np.ndarray):
    b, h, w, c = x.shape
    return x.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4)), x.shape


def avgpool2_backward(dy: np.ndarray, xshape) -> np.ndarray:
    return np.repeat(np.repeat(dy, 2, axis=1), 2, axis=2) * 0.25


def upsample2_forward(x: np.ndarray):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2), x.shape


def upsample2_backward(dy: np.ndarray, xshape) -> np.ndarray:
    b, h, w, c = xshape
    return dy.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
