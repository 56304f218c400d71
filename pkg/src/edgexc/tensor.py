"""Numeric kernels over dense NCHW arrays.

Tensors are plain :class:`numpy.ndarray` objects in row-major (N, C, H, W)
layout, float32 for training and float64 for gradient checks.  Every forward
kernel has a ``*_backward`` partner that recomputes what it needs from the
forward inputs and returns vector-Jacobian products; nothing here keeps state
between calls.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import (
    DegenerateVarianceError,
    GeometryError,
    LabelError,
    ShapeError,
    UnsupportedConfigError,
)

__all__ = [
    "ConvGeometry",
    "as_tensor",
    "flat_index",
    "conv2d",
    "conv2d_backward",
    "depthwise_conv2d",
    "depthwise_conv2d_backward",
    "batchnorm2d",
    "batchnorm2d_backward",
    "relu",
    "relu_backward",
    "maxpool2d",
    "maxpool2d_backward",
    "global_avg_pool",
    "global_avg_pool_backward",
    "linear",
    "linear_backward",
    "softmax",
    "softmax_cross_entropy",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    """Return a C-contiguous array of 1-4 positive extents in single or double precision."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise UnsupportedConfigError(f"dtype must be float32 or float64, got {dtype}")
    arr = np.ascontiguousarray(data, dtype=dtype)
    if not 1 <= arr.ndim <= 4 or min(arr.shape) < 1:
        raise ShapeError("tensor needs 1-4 positive extents", arr.shape)
    return arr


def flat_index(shape, n, c, h, w) -> int:
    _, C, H, W = shape
    return ((n * C + c) * H + h) * W + w


@dataclass(frozen=True)
class ConvGeometry:
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1 or self.stride < 1 or self.padding < 0:
            raise GeometryError(f"invalid geometry {self}")

    @classmethod
    def square(cls, kernel, stride=1, padding=0):
        return cls(kernel, kernel, stride, padding)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if ho < 1 or wo < 1:
            raise GeometryError(f"{self} on {h}x{w} input gives output {ho}x{wo}")
        return ho, wo


def _check4(name, x):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W)", x.shape)


def _pad(x, p, value=0.0):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _windows(xp, kh, kw, s, ho, wo):
    """Read-only view of shape (N, C, kh, kw, Ho, Wo) over a padded input."""
    sn, sc, sh, sw = xp.strides
    n, c = xp.shape[:2]
    return as_strided(
        xp, (n, c, kh, kw, ho, wo), (sn, sc, sh, sw, sh * s, sw * s), writeable=False
    )


def _conv_checks(x, w, bias=None):
    _check4("input", x)
    _check4("weight", w)
    if x.shape[1] != w.shape[1]:
        raise ShapeError("input channels do not match weight", x.shape, w.shape)
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError("bias must have one entry per output channel", bias.shape, w.shape)


def conv2d(x, w, bias=None, g: ConvGeometry | None = None):
    """Dense 2-D cross-correlation with symmetric zero padding."""
    _conv_checks(x, w, bias)
    cout, cin, kh, kw = w.shape
    g = g or ConvGeometry(kh, kw)
    if (g.kernel_h, g.kernel_w) != (kh, kw):
        raise ShapeError("geometry kernel disagrees with weight", (g.kernel_h, g.kernel_w), (kh, kw))
    n = x.shape[0]
    ho, wo = g.out_size(*x.shape[2:])
    xp = _pad(x, g.padding)
    s = g.stride
    if kh == 1 and kw == 1:
        xs = xp[:, :, : s * ho : s, : s * wo : s].reshape(n, cin, ho * wo)
        out = np.matmul(w.reshape(cout, cin), xs).reshape(n, cout, ho, wo)
    else:
        cols = _windows(xp, kh, kw, s, ho, wo)
        out = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
        out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out


def conv2d_backward(x, w, g: ConvGeometry | None, dy):
    """Return ``(dx, dw, dbias)`` for :func:`conv2d`."""
    _conv_checks(x, w)
    cout, cin, kh, kw = w.shape
    g = g or ConvGeometry(kh, kw)
    n, _, h, wd = x.shape
    ho, wo = g.out_size(h, wd)
    if dy.shape != (n, cout, ho, wo):
        raise ShapeError("cotangent does not match conv2d output", dy.shape, (n, cout, ho, wo))
    s, p = g.stride, g.padding
    xp = _pad(x, p)
    dbias = dy.sum(axis=(0, 2, 3))
    dxp = np.zeros(xp.shape, dtype=np.result_type(x, w, dy))
    if kh == 1 and kw == 1:
        xs = xp[:, :, : s * ho : s, : s * wo : s].reshape(n, cin, ho * wo)
        dyr = dy.reshape(n, cout, ho * wo)
        dw = np.tensordot(dyr, xs, axes=([0, 2], [0, 2])).reshape(w.shape)
        dxs = np.matmul(w.reshape(cout, cin).T, dyr).reshape(n, cin, ho, wo)
        dxp[:, :, : s * ho : s, : s * wo : s] = dxs
    else:
        cols = _windows(xp, kh, kw, s, ho, wo)
        dw = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 4, 5]))
        # (Cin, kh, kw, N, Ho, Wo)
        dcols = np.tensordot(w, dy, axes=([0], [1]))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, i, j].transpose(1, 0, 2, 3)
    dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
    return np.ascontiguousarray(dx, dtype=x.dtype), dw.astype(w.dtype), dbias.astype(w.dtype)


def _depthwise_checks(x, w):
    _check4("input", x)
    _check4("weight", w)
    if w.shape[1] != 1:
        raise UnsupportedConfigError(f"depth multiplier must be 1, weight has {w.shape[1]}")
    if w.shape[0] != x.shape[1]:
        raise ShapeError("depthwise weight needs one filter per input channel", x.shape, w.shape)


def depthwise_conv2d(x, w, g: ConvGeometry | None = None):
    """Per-channel spatial filtering: output channel c sees only input channel c."""
    _depthwise_checks(x, w)
    c, _, kh, kw = w.shape
    g = g or ConvGeometry(kh, kw)
    ho, wo = g.out_size(*x.shape[2:])
    xp = _pad(x, g.padding)
    s = g.stride
    out = np.zeros((x.shape[0], c, ho, wo), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            out += w[:, 0, i, j].reshape(1, c, 1, 1) * xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
    return out


def depthwise_conv2d_backward(x, w, g: ConvGeometry | None, dy):
    """Return ``(dx, dw)`` for :func:`depthwise_conv2d`."""
    _depthwise_checks(x, w)
    c, _, kh, kw = w.shape
    g = g or ConvGeometry(kh, kw)
    n, _, h, wd = x.shape
    ho, wo = g.out_size(h, wd)
    if dy.shape != (n, c, ho, wo):
        raise ShapeError("cotangent does not match depthwise output", dy.shape, (n, c, ho, wo))
    s, p = g.stride, g.padding
    xp = _pad(x, p)
    dxp = np.zeros(xp.shape, dtype=np.result_type(x, dy))
    dw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            win = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
            dw[:, 0, i, j] = np.einsum("nchw,nchw->c", dy, win)
            dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += w[:, 0, i, j].reshape(1, c, 1, 1) * dy
    dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
    return np.ascontiguousarray(dx, dtype=x.dtype), dw


def batchnorm2d(
    x,
    gamma,
    beta,
    running_mean,
    running_var,
    mode="train",
    momentum=BN_MOMENTUM,
    eps=BN_EPS,
):
    """Per-channel batch normalization.

    In ``"train"`` mode the batch statistics normalize ``x`` and the running
    buffers are updated in place as ``(1 - momentum) * old + momentum * batch``
    (the running variance uses the unbiased batch estimate).  ``"eval"`` mode
    normalizes with the running buffers and leaves them untouched.
    """
    _check4("input", x)
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"{name} must have one entry per channel", t.shape, (c,))
    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise DegenerateVarianceError(
                f"train-mode batch norm needs N*H*W >= 2 per channel, got {count} for shape {x.shape}"
            )
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (count / (count - 1))
    elif mode == "eval":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    scale = (gamma * inv).reshape(1, c, 1, 1)
    shift = (beta - mean * gamma * inv).reshape(1, c, 1, 1)
    return (x * scale + shift).astype(x.dtype, copy=False)


def batchnorm2d_backward(x, gamma, dy, mode="train", running_mean=None, running_var=None, eps=BN_EPS):
    """Return ``(dx, dgamma, dbeta)``.  Eval mode needs the running buffers."""
    c = x.shape[1]
    axes = (0, 2, 3)
    dbeta = dy.sum(axis=axes)
    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(x.var(axis=axes, keepdims=True) + eps)
    elif mode == "eval":
        if running_mean is None or running_var is None:
            raise ValueError("eval-mode backward needs running_mean and running_var")
        mean = running_mean.reshape(1, c, 1, 1)
        inv = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    xhat = (x - mean) * inv
    dgamma = (dy * xhat).sum(axis=axes)
    g = gamma.reshape(1, c, 1, 1)
    if mode == "train":
        dx = (g * inv / m) * (m * dy - dbeta.reshape(1, c, 1, 1) - xhat * dgamma.reshape(1, c, 1, 1))
    else:
        dx = dy * g * inv
    return dx.astype(x.dtype, copy=False), dgamma.astype(gamma.dtype), dbeta.astype(gamma.dtype)


def relu(x):
    return np.maximum(x, 0, dtype=x.dtype)


def relu_backward(x, dy):
    # gradient at exactly 0 is 0
    return dy * (x > 0)


def _pool_windows(x, g):
    ho, wo = g.out_size(*x.shape[2:])
    xp = _pad(x, g.padding, value=-np.inf)
    win = _windows(xp, g.kernel_h, g.kernel_w, g.stride, ho, wo)
    n, c = x.shape[:2]
    # (N, C, Ho, Wo, kh*kw) in row-major window order
    flat = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c, ho, wo, g.kernel_h * g.kernel_w)
    return flat, xp.shape, ho, wo


def maxpool2d(x, g: ConvGeometry):
    _check4("input", x)
    flat, _, _, _ = _pool_windows(x, g)
    return flat.max(axis=-1)


def maxpool2d_backward(x, g: ConvGeometry, dy):
    """Route each output gradient to its window's first maximal element."""
    _check4("input", x)
    flat, pshape, ho, wo = _pool_windows(x, g)
    if dy.shape != flat.shape[:4]:
        raise ShapeError("cotangent does not match maxpool output", dy.shape, flat.shape[:4])
    arg = flat.argmax(axis=-1)
    s, p = g.stride, g.padding
    dxp = np.zeros(pshape, dtype=dy.dtype)
    for k in range(g.kernel_h * g.kernel_w):
        i, j = divmod(k, g.kernel_w)
        dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += np.where(arg == k, dy, 0)
    h, w = x.shape[2:]
    return np.ascontiguousarray(dxp[:, :, p : p + h, p : p + w])


def global_avg_pool(x):
    _check4("input", x)
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(x_shape, dy):
    n, c, h, w = x_shape
    return np.broadcast_to((dy / (h * w)).reshape(n, c, 1, 1), x_shape).copy()


def linear(x, w, bias=None):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError("linear expects x[N, Din] and w[Dout, Din]", x.shape, w.shape)
    out = x @ w.T
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ShapeError("bias must have Dout entries", bias.shape, w.shape)
        out += bias
    return out


def linear_backward(x, w, dy):
    """Return ``(dx, dw, dbias)``."""
    if dy.shape != (x.shape[0], w.shape[0]):
        raise ShapeError("cotangent does not match linear output", dy.shape, (x.shape[0], w.shape[0]))
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    Returns ``(loss, dlogits)`` with ``dlogits = (softmax - onehot) / N``.
    """
    if logits.ndim != 2:
        raise ShapeError("logits must be 2-D (N, K)", logits.shape)
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError("need one label per row", labels.shape, (n,))
    if labels.size and (labels.min() < 0 or labels.max() >= k or not np.issubdtype(labels.dtype, np.integer)):
        raise LabelError(f"labels must be integers in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    d = np.exp(z - logsum[:, None])
    d[rows, labels] -= 1
    d /= n
    return loss, d.astype(logits.dtype, copy=False)
