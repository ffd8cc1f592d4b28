"""Neural network layers on top of :mod:`posemtl.autograd`.

Convolution, pooling and batch normalisation are single fused graph nodes
with hand-written backward rules; they are checked against finite
differences in the test-suite like every other primitive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import DTYPE, ShapeError, Tensor, as_tensor, make_node, parameter

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - kernel) // stride + 1
    if out <= 0:
        raise ShapeError(f"kernel {kernel} (stride {stride}, pad {pad}) does not fit input {size}")
    return out


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N, C, H, W) with ``weight`` (O, C, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and filters, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but filters expect {ci}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # one contiguous im2col copy, rows ordered (n, ho, wo), columns (c, kh, kw)
    cols = _windows(xp, kh, kw, stride).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    w2 = weight.data.reshape(o, -1)
    out = (cols @ w2.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} filters")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)
    need_x = x.requires_grad

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(o, c, kh, kw)
        gx = None
        if need_x:
            # channel-major scatter keeps every strided add contiguous in (n, h, w)
            gcols = (w2.T @ g.transpose(1, 0, 2, 3).reshape(o, -1)).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_node(out, parents, bw, "conv2d")


def _pool_check(x: Tensor, size: int, stride: int, pad: int):
    if x.ndim != 4:
        raise ShapeError(f"pool: expected (N, C, H, W) input, got {x.shape}")
    _, _, h, w = x.shape
    if size > h + 2 * pad or size > w + 2 * pad:
        raise ShapeError(f"pool: window {size} larger than padded input {(h + 2 * pad, w + 2 * pad)}")
    return conv_output_size(h, size, stride, pad), conv_output_size(w, size, stride, pad)


def max_pool2d(x, size: int, stride: int, pad: int = 0) -> Tensor:
    """Per-window maximum; the gradient is routed to the first maximal element."""
    x = as_tensor(x)
    ho, wo = _pool_check(x, size, stride, pad)
    h, w = x.shape[2:]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) \
        if pad else x.data
    win = _windows(xp, size, size, stride)
    flat = win.reshape(win.shape[:4] + (size * size,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(size):
            for j in range(size):
                sel = arg == i * size + j
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * sel
        return (gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp,)

    return make_node(out, (x,), bw, "max_pool2d")


def avg_pool2d(x, size: int, stride: int, pad: int = 0) -> Tensor:
    """Per-window mean (zero padding counts towards the window)."""
    x = as_tensor(x)
    ho, wo = _pool_check(x, size, stride, pad)
    h, w = x.shape[2:]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    out = _windows(xp, size, size, stride).mean(axis=(-2, -1))
    scale = 1.0 / (size * size)

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        gs = g * scale
        for i in range(size):
            for j in range(size):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gs
        return (gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp,)

    return make_node(out, (x,), bw, "avg_pool2d")


def batch_norm(x, gamma, beta, running_mean: np.ndarray | None = None,
               running_var: np.ndarray | None = None, training: bool = True,
               eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Normalise over every axis except 1 (channels).

    In training mode the batch statistics are used and, when running buffers
    are given, those are updated in place as ``m * running + (1 - m) * batch``
    (the variance buffer takes the unbiased batch estimate).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2:
        raise ShapeError(f"batch_norm: expected (N, C, ...) input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: scale/shift shapes {gamma.shape}/{beta.shape} for {c} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm: batch size 1 in training mode")
        m = xd.size // c
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1 - momentum) * mu
        if running_var is not None:
            running_var *= momentum
            running_var += (1 - momentum) * var * m / (m - 1)
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm: evaluation mode needs running statistics")
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = gd * xhat + beta.data.reshape(bshape)

    def bw(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gd
        if training:
            gx = inv.reshape(bshape) * (
                gxhat - gxhat.mean(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), bw, "batch_norm")


def dropout(x, ratio: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity in evaluation mode."""
    x = as_tensor(x)
    if not training or ratio == 0.0:
        return x
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"dropout ratio must lie in [0, 1), got {ratio}")
    keep = (rng.random(x.shape) >= ratio) / (1.0 - ratio)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def _check_finite(y: np.ndarray, op: str) -> None:
    if np.isnan(y).any():
        raise ValueError(f"{op}: NaN input")


def softmax(y, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    y = as_tensor(y)
    _check_finite(y.data, "softmax")
    z = y.data - y.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_node(p, (y,), bw, "softmax")


def log_softmax(y, axis: int = -1) -> Tensor:
    y = as_tensor(y)
    _check_finite(y.data, "log_softmax")
    z = y.data - y.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (y,), bw, "log_softmax")


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Fused log-sum-exp cross-entropy.

    ``logits`` is a (C,) vector with an integer label or an (N, C) batch with
    an (N,) label array. ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"``.
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    y = logits.data[None, :] if single else logits.data
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.ndim != 2 or lab.shape != (y.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {lab.shape}")
    if np.any(lab < 0) or np.any(lab >= y.shape[1]):
        raise ValueError(f"cross_entropy: label out of range for {y.shape[1]} classes")
    z = y - y.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(y.shape[0])
    per = lse - z[rows, lab]
    p = np.exp(z - lse[:, None])
    p[rows, lab] -= 1.0  # softmax - onehot
    n = y.shape[0]
    if reduction == "none":
        out = per[0] if single else per
    elif reduction == "sum":
        out = per.sum()
    elif reduction == "mean":
        out = per.mean()
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def bw(g):
        if reduction == "none":
            gy = p * (np.reshape(g, (n, 1)))
        elif reduction == "sum":
            gy = p * g
        else:
            gy = p * (g / n)
        return (gy[0] if single else gy,)

    return make_node(np.asarray(out), (logits,), bw, "cross_entropy")


def argmax_class(y) -> int:
    """Index of the largest logit; ties go to the lowest index."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    if y.size == 0:
        raise ValueError("argmax_class: empty logits")
    return int(np.argmax(y))


# ---------------------------------------------------------------------------
# parameterised layers


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    pad: int = 0

    @classmethod
    def create(cls, rng, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
               pad: int | None = None) -> "ConvLayer":
        pad = kernel // 2 if pad is None else pad
        w = he_normal(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel)
        return cls(parameter(w), parameter(np.zeros(out_ch)), stride, pad)

    def __call__(self, x) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)


@dataclass
class BatchNormLayer:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def create(cls, channels: int) -> "BatchNormLayer":
        return cls(parameter(np.ones(channels)), parameter(np.zeros(channels)),
                   np.zeros(channels), np.ones(channels))

    def __call__(self, x, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          training, self.eps, self.momentum)


@dataclass
class FcLayer:
    """``y = W^T x (+ b)`` with ``W`` stored as (D_in, D_out)."""

    weight: Tensor
    bias: Tensor | None = None

    @classmethod
    def create(cls, rng, d_in: int, d_out: int, bias: bool = True,
               zero: bool = False) -> "FcLayer":
        w = np.zeros((d_in, d_out)) if zero else he_normal(rng, (d_in, d_out), d_in)
        return cls(parameter(w), parameter(np.zeros(d_out)) if bias else None)

    def __call__(self, x) -> Tensor:
        out = as_tensor(x) @ self.weight
        return out + self.bias if self.bias is not None else out


@dataclass
class DropoutLayer:
    ratio: float = 0.4
    rng_seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"dropout ratio must lie in [0, 1), got {self.ratio}")
        self.rng = np.random.default_rng(self.rng_seed)

    def reseed(self, seed: int) -> None:
        self.rng_seed = seed
        self.rng = np.random.default_rng(seed)

    def __call__(self, x, training: bool) -> Tensor:
        return dropout(x, self.ratio, self.rng, training)
