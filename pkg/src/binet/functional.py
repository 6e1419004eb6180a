"""Differentiable layer ops built on :mod:`binet.tensor`.

Each op has a plain-array kernel (``*_array``) reused by the deployment
executor so both paths share identical float arithmetic.
"""

from __future__ import annotations

from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor

IntPair = Union[int, tuple[int, int]]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _pair(v: IntPair) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected an int or a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv(x_shape, w_shape, stride, padding):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ValueError(f"conv2d expects NCHW input and OIHW weight, got {x_shape} and {w_shape}")
    if x_shape[1] != w_shape[1]:
        raise ValueError(f"conv2d: input has {x_shape[1]} channels but weight expects {w_shape[1]}")
    (sh, sw), (ph, pw) = stride, padding
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ValueError(f"conv2d: invalid stride {stride} / padding {padding}")
    kh, kw = w_shape[2:]
    if x_shape[2] + 2 * ph < kh or x_shape[3] + 2 * pw < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {x_shape[2:]} (padding {padding})")


def im2col(x: np.ndarray, kh: int, kw: int, stride: tuple[int, int], padding: tuple[int, int]) -> np.ndarray:
    """Lower an NCHW array to rows of receptive fields.

    Returns an array of shape ``(N, OH, OW, C*kh*kw)``, channel-major within
    each row (c, i, j order), matching an OIHW weight flattened per filter.
    """
    (sh, sw), (ph, pw) = stride, padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    n, c, oh, ow = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh, ow, c * kh * kw)


def _lower(x: np.ndarray, kh: int, kw: int, stride: tuple[int, int], padding: tuple[int, int]) -> np.ndarray:
    """Receptive-field rows in (i, j, c) order: shape (N, OH, OW, kh*kw*C).

    Channels are innermost so every copy moves a contiguous run; this is
    the layout of the training convolution.
    """
    n, c, h, w = x.shape
    (sh, sw), (ph, pw) = stride, padding
    oh, ow = conv_output_size(h, kh, sh, ph), conv_output_size(w, kw, sw, pw)
    xp = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=x.dtype)
    xp[:, ph : ph + h, pw : pw + w, :] = x.transpose(0, 2, 3, 1)
    out = np.empty((n, oh, ow, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, :, i, j, :] = xp[:, i : i + sh * oh : sh, j : j + sw * ow : sw, :]
    return out.reshape(n, oh, ow, kh * kw * c)


def _scatter(cols: np.ndarray, x_shape, kh: int, kw: int, stride, padding) -> np.ndarray:
    """Adjoint of :func:`_lower`, returning an NCHW array."""
    n, c, h, w = x_shape
    (sh, sw), (ph, pw) = stride, padding
    oh, ow = cols.shape[1], cols.shape[2]
    cols = cols.reshape(n, oh, ow, kh, kw, c)
    out = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + sh * oh : sh, j : j + sw * ow : sw, :] += cols[:, :, :, i, j, :]
    return np.ascontiguousarray(out[:, ph : ph + h, pw : pw + w, :].transpose(0, 3, 1, 2))


def _wmat(w: np.ndarray) -> np.ndarray:
    o = w.shape[0]
    return np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(o, -1)


def conv2d_array(x: np.ndarray, w: np.ndarray, stride: IntPair = 1, padding: IntPair = 0) -> np.ndarray:
    """Cross-correlation of NCHW ``x`` with OIHW ``w`` (no bias)."""
    stride, padding = _pair(stride), _pair(padding)
    _check_conv(x.shape, w.shape, stride, padding)
    o, _, kh, kw = w.shape
    cols = _lower(x, kh, kw, stride, padding)
    n, oh, ow, k = cols.shape
    out = cols.reshape(-1, k) @ _wmat(w).T
    return np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))


def conv2d(x: Tensor, w: Tensor, stride: IntPair = 1, padding: IntPair = 0) -> Tensor:
    stride, padding = _pair(stride), _pair(padding)
    _check_conv(x.shape, w.shape, stride, padding)
    o, c, kh, kw = w.shape
    cols = _lower(x.data, kh, kw, stride, padding)
    n, oh, ow, k = cols.shape
    cols2 = cols.reshape(-1, k)
    wmat = _wmat(w.data)
    out = np.ascontiguousarray((cols2 @ wmat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2))
    x_shape, need_x = x.shape, x.requires_grad

    def _bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gw = np.ascontiguousarray((gmat.T @ cols2).reshape(o, kh, kw, c).transpose(0, 3, 1, 2))
        gx = _scatter((gmat @ wmat).reshape(n, oh, ow, k), x_shape, kh, kw, stride, padding) if need_x else None
        return gx, gw

    return Tensor._from_op(out, (x, w), _bw)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` for ``x`` of shape (N, in) and ``w`` of shape (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T

    def _bw(g):
        return g @ wd, g.T @ xd

    return Tensor._from_op(out, (x, w), _bw)


def hardtanh(x: Tensor) -> Tensor:
    xd = x.data
    out = np.clip(xd, -1.0, 1.0)

    def _bw(g):
        return (g * ((xd >= -1.0) & (xd <= 1.0)),)

    return Tensor._from_op(out, (x,), _bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


# -- batch normalization ---------------------------------------------------
def _bn_axes(ndim: int) -> tuple[int, ...]:
    if ndim == 2:
        return (0,)
    if ndim == 4:
        return (0, 2, 3)
    raise ValueError(f"batch_norm expects (N, C) or (N, C, H, W), got {ndim} dims")


def _bn_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(1, -1) if ndim == 2 else v.reshape(1, -1, 1, 1)


def bn_eval_affine(gamma, beta, running_mean, running_var, eps: float = BN_EPS):
    """Per-channel (mean, scale, shift) in float32 such that y = (x - mean) * scale + shift."""
    scale = (np.asarray(gamma, np.float64) / np.sqrt(np.asarray(running_var, np.float64) + eps)).astype(np.float32)
    return np.asarray(running_mean, np.float32), scale, np.asarray(beta, np.float32)


def bn_apply_array(x: np.ndarray, mean: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    nd = x.ndim
    out = (x - _bn_view(mean, nd)) * _bn_view(scale, nd)
    out += _bn_view(shift, nd)
    return out


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalization over the channel axis.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate).  Statistics accumulate in float64.
    """
    axes = _bn_axes(x.ndim)
    nd = x.ndim
    if x.shape[1] != gamma.shape[0]:
        raise ValueError(f"batch_norm: {x.shape[1]} channels but {gamma.shape[0]} parameters")
    if not training:
        mean, scale, shift = bn_eval_affine(gamma.data, beta.data, running_mean, running_var, eps)
        out = bn_apply_array(x.data, mean, scale, shift).astype(x.dtype, copy=False)
        inv = (1.0 / np.sqrt(np.asarray(running_var, np.float64) + eps)).astype(x.dtype)

        def _bw_eval(g):
            xhat = (x.data - _bn_view(mean, nd)) * _bn_view(inv, nd)
            return (
                g * _bn_view(scale, nd),
                (g * xhat).sum(axis=axes, dtype=np.float64).astype(g.dtype),
                g.sum(axis=axes, dtype=np.float64).astype(g.dtype),
            )

        return Tensor._from_op(out, (x, gamma, beta), _bw_eval)

    xd = x.data
    m = xd.size // xd.shape[1]
    mu = xd.mean(axis=axes, dtype=np.float64)
    centered = xd - _bn_view(mu, nd).astype(xd.dtype)
    var = np.mean(np.square(centered), axis=axes, dtype=np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * _bn_view(inv_std, nd).astype(xd.dtype)
    out = xhat * _bn_view(gamma.data, nd) + _bn_view(beta.data, nd)

    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.astype(running_mean.dtype)
    unbiased = var * m / max(m - 1, 1)
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased.astype(running_var.dtype)

    gdat = gamma.data

    def _bw(g):
        sum_g = g.sum(axis=axes, dtype=np.float64)
        sum_gx = (g * xhat).sum(axis=axes, dtype=np.float64)
        if x.requires_grad:
            coef = _bn_view(gdat * inv_std / m, nd).astype(xd.dtype)
            gx = coef * (m * g - _bn_view(sum_g, nd).astype(xd.dtype) - xhat * _bn_view(sum_gx, nd).astype(xd.dtype))
        else:
            gx = None
        return gx, sum_gx.astype(g.dtype), sum_g.astype(g.dtype)

    return Tensor._from_op(out.astype(xd.dtype, copy=False), (x, gamma, beta), _bw)


# -- pooling ---------------------------------------------------------------
def _pool_views(x: np.ndarray, k: int) -> list[np.ndarray]:
    """The k*k strided views of non-overlapping windows; trailing rows/cols that
    do not fill a window are dropped."""
    n, c, h, w = x.shape
    if k < 1 or h < k or w < k:
        raise ValueError(f"max_pool2d: kernel {k} does not fit spatial size {h}x{w}")
    oh, ow = h // k, w // k
    return [x[:, :, i : i + k * oh : k, j : j + k * ow : k] for i in range(k) for j in range(k)]


def max_pool2d_array(x: np.ndarray, kernel: int) -> np.ndarray:
    views = _pool_views(x, kernel)
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)
    return out


def max_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride == kernel, floor mode).

    Ties route the gradient to the first maximal element (row-major in the window).
    """
    if x.ndim != 4:
        raise ValueError(f"max_pool2d expects NCHW, got {x.shape}")
    k = kernel
    views = _pool_views(x.data, k)
    out = views[0].copy()
    idx = np.zeros(out.shape, dtype=np.int8)
    for m, v in enumerate(views[1:], start=1):
        better = v > out
        out[better] = v[better]
        idx[better] = m
    shape = x.shape
    oh, ow = out.shape[2], out.shape[3]

    def _bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        for m in range(k * k):
            i, j = divmod(m, k)
            gx[:, :, i : i + k * oh : k, j : j + k * ow : k] = np.where(idx == m, g, 0)
        return (gx,)

    return Tensor._from_op(out, (x,), _bw)


def global_avg_pool_array(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = global_avg_pool_array(x.data)

    def _bw(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).astype(g.dtype),)

    return Tensor._from_op(out, (x,), _bw)


# -- loss ------------------------------------------------------------------
def log_softmax_array(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    labels = labels.astype(np.int64)
    logp = log_softmax_array(logits.data)
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    dtype = logits.dtype

    def _bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return ((p * (float(g) / n)).astype(dtype),)

    return Tensor._from_op(np.asarray(loss, dtype=dtype), (logits,), _bw)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


__all__ = [
    "conv2d",
    "conv2d_array",
    "linear",
    "hardtanh",
    "batch_norm",
    "bn_eval_affine",
    "bn_apply_array",
    "max_pool2d",
    "max_pool2d_array",
    "global_avg_pool",
    "global_avg_pool_array",
    "cross_entropy",
    "flatten",
    "add",
    "im2col",
]
