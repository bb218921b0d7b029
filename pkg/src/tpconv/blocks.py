"""Vanilla layers used downstream of the TPC layer, each with a hand-written backward."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError
from .timefuncs import activate, activate_deriv


@dataclass
class Conv1dParams:
    weight: np.ndarray  # out_ch x in_ch x ksize
    bias: np.ndarray  # out_ch

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 3 or self.weight.shape[2] % 2 == 0:
            raise ConfigError(f"conv weight must be out x in x odd-ksize, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ConfigError("conv bias length must equal out_ch")


@dataclass
class LinearParams:
    weight: np.ndarray  # out x in
    bias: np.ndarray  # out

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ConfigError(f"linear weight {self.weight.shape} / bias {self.bias.shape} mismatch")


def init_conv1d(rng, in_ch: int, out_ch: int, ksize: int) -> Conv1dParams:
    bound = 1.0 / math.sqrt(in_ch * ksize)
    return Conv1dParams(rng.uniform(-bound, bound, (out_ch, in_ch, ksize)), np.zeros(out_ch))


def init_linear(rng, n_in: int, n_out: int) -> LinearParams:
    bound = 1.0 / math.sqrt(n_in)
    return LinearParams(rng.uniform(-bound, bound, (n_out, n_in)), np.zeros(n_out))


def conv1d(x, p: Conv1dParams):
    """Same-length 1-D convolution (cross-correlation) with zero padding."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"conv1d input {x.shape} incompatible with weight {p.weight.shape}")
    k = p.weight.shape[2]
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    windows = sliding_window_view(xp, k, axis=2)  # B x C x L x k
    out = np.einsum("bcjk,ock->boj", windows, p.weight, optimize=True) + p.bias[None, :, None]
    return out, (windows, p, x.shape)


def conv1d_backward(cache, grad):
    windows, p, in_shape = cache
    grad = np.asarray(grad, dtype=np.float64)
    B, C, L = in_shape
    k = p.weight.shape[2]
    pad = (k - 1) // 2
    dw = np.einsum("boj,bcjk->ock", grad, windows, optimize=True)
    db = grad.sum(axis=(0, 2))
    dwin = np.einsum("boj,ock->bcjk", grad, p.weight, optimize=True)
    dxp = np.zeros((B, C, L + 2 * pad))
    for kk in range(k):
        dxp[:, :, kk:kk + L] += dwin[..., kk]
    return dxp[:, :, pad:pad + L], {"weight": dw, "bias": db}


def maxpool1d(x, window: int = 2, stride: int = 2):
    """Non-overlapping max pooling; a short tail window passes through."""
    if window != stride:
        raise ConfigError("only non-overlapping pooling (window == stride) is supported")
    x = np.asarray(x, dtype=np.float64)
    B, C, L = x.shape
    if L < 1:
        raise ShapeError("cannot pool an empty sequence")
    Lo = -(-L // window)
    xp = np.full((B, C, Lo * window), -np.inf)
    xp[:, :, :L] = x
    win = xp.reshape(B, C, Lo, window)
    arg = win.argmax(axis=3)  # first maximal index on ties
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
    return out, (arg, x.shape, window)


def maxpool1d_backward(cache, grad):
    arg, (B, C, L), window = cache
    Lo = arg.shape[2]
    dwin = np.zeros((B, C, Lo, window))
    np.put_along_axis(dwin, arg[..., None], np.asarray(grad)[..., None], axis=3)
    return dwin.reshape(B, C, Lo * window)[:, :, :L]


def linear(x, p: LinearParams):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"linear input {x.shape} incompatible with weight {p.weight.shape}")
    return x @ p.weight.T + p.bias, (x, p)


def linear_backward(cache, grad):
    x, p = cache
    grad = np.asarray(grad, dtype=np.float64)
    return grad @ p.weight, {"weight": grad.T @ x, "bias": grad.sum(axis=0)}


def activation(x, aid="relu"):
    x = np.asarray(x, dtype=np.float64)
    return np.asarray(activate(aid, x)), (x, aid)


def activation_backward(cache, grad):
    x, aid = cache
    return np.asarray(grad) * activate_deriv(aid, x)


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x):
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
