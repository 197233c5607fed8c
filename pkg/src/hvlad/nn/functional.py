"""Forward/backward pairs for the layers used by the encoders.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes the cache. Plain-named wrappers (``conv2d``, ``relu`` ...) return
only the output. Arrays keep the dtype they come in with, so the same code
runs in float32 for training and float64 for gradient checks.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import LabelOutOfRange, NonFinite, ShapeMismatch


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFinite(f"non-finite values produced by {where}")
    return x


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


# -- convolution ------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, b, stride=1, pad=0):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    C_out, C_in, kh, kw = w.shape
    if C != C_in:
        raise ShapeMismatch(f"input has {C} channels, kernel expects {C_in}")
    if b.shape != (C_out,):
        raise ShapeMismatch(f"bias shape {b.shape} != ({C_out},)")
    if stride < 1:
        raise ShapeMismatch("stride must be >= 1")
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(W, kw, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeMismatch(f"kernel {kh}x{kw} does not fit padded input {H}x{W}")

    if kh == 1 and kw == 1 and pad == 0:
        xs = x[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, C)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        # [B, C, Ho, Wo, kh, kw] -> [B*Ho*Wo, C*kh*kw]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    out = cols @ w.reshape(C_out, -1).T + b
    out = out.reshape(B, Ho, Wo, C_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    check_finite(out, "conv2d")
    return out, (x.shape, cols, w, stride, pad)


def conv2d_backward(dout, cache, need_dx=True):
    x_shape, cols, w, stride, pad = cache
    B, C, H, W = x_shape
    C_out, _, kh, kw = w.shape
    Ho, Wo = dout.shape[2], dout.shape[3]
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, C_out)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dmat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = dmat @ w.reshape(C_out, -1)
    if kh == 1 and kw == 1 and pad == 0:
        dx = np.zeros(x_shape, dtype=dout.dtype)
        dx[:, :, ::stride, ::stride][:, :, :Ho, :Wo] = dcols.reshape(B, Ho, Wo, C).transpose(0, 3, 1, 2)
        return dx, dw, db
    dcols = dcols.reshape(B, Ho, Wo, C, kh, kw)
    dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


def conv2d(x, w, b, stride=1, pad=0):
    return conv2d_forward(x, w, b, stride, pad)[0]


# -- batch norm --------------------------------------------------------------

def batchnorm2d_forward(x, gamma, beta, running_mean, running_var, train=True,
                        momentum=0.1, eps=1e-5):
    """Per-channel batch normalization.

    In train mode the running statistics are updated in place (unbiased
    variance, as most frameworks do); eval mode only reads them.
    """
    C = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (C,):
            raise ShapeMismatch(f"{name} shape {arr.shape} != ({C},)")
    axes = (0, 2, 3)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        n = x.size // C
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    check_finite(out, "batchnorm2d")
    return out, (xhat, inv_std, gamma, train)


def batchnorm2d_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    axes = (0, 2, 3)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    g = (gamma * inv_std)[None, :, None, None]
    if not train:
        return dout * g, dgamma, dbeta
    m = dout.size // dout.shape[1]
    dx = g * (dout - dbeta[None, :, None, None] / m - xhat * dgamma[None, :, None, None] / m)
    return dx, dgamma, dbeta


def batchnorm2d(x, gamma, beta, running_mean, running_var, train=True, momentum=0.1, eps=1e-5):
    return batchnorm2d_forward(x, gamma, beta, running_mean, running_var, train, momentum, eps)[0]


# -- elementwise / pooling / affine ------------------------------------------

def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, x.dtype.type(0)), mask


def relu_backward(dout, mask):
    return np.where(mask, dout, dout.dtype.type(0))


def relu(x):
    return relu_forward(x)[0]


def maxpool2d_forward(x, k, stride=None):
    """Window max over the last two axes; remembers the flat argmax per window."""
    kh, kw = _pair(k)
    sh, sw = _pair(stride if stride is not None else (kh, kw))
    B, C, H, W = x.shape
    if kh > H or kw > W:
        raise ShapeMismatch(f"pool window {kh}x{kw} larger than input {H}x{W}")
    Ho = (H - kh) // sh + 1
    Wo = (W - kw) // sw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    win = win.reshape(B, C, Ho, Wo, kh * kw)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    # flat index of each winner inside x
    di, dj = np.divmod(arg, kw)
    rows = np.arange(Ho)[:, None] * sh + di
    cols = np.arange(Wo)[None, :] * sw + dj
    base = (np.arange(B)[:, None] * C + np.arange(C)[None, :]) * (H * W)
    flat = base[:, :, None, None] + rows * W + cols
    return np.ascontiguousarray(out), (x.shape, flat)


def maxpool2d_backward(dout, cache):
    x_shape, flat = cache
    size = int(np.prod(x_shape))
    dx = np.bincount(flat.ravel(), weights=dout.ravel(), minlength=size)
    return dx.astype(dout.dtype, copy=False).reshape(x_shape)


def maxpool2d(x, k, stride=None):
    return maxpool2d_forward(x, k, stride)[0]


def linear_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"linear: x {x.shape}, W {w.shape}, b {b.shape}")
    out = x @ w.T + b
    check_finite(out, "linear")
    return out, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def linear(x, w, b):
    return linear_forward(x, w, b)[0]


# -- loss --------------------------------------------------------------------

def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    B, n_cls = logits.shape
    if labels.shape != (B,):
        raise ShapeMismatch(f"labels shape {labels.shape} != ({B},)")
    if np.any(labels < 0) or np.any(labels >= n_cls):
        raise LabelOutOfRange(f"labels must lie in [0, {n_cls})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(log_z - shifted[rows, labels]))
    grad = np.exp(shifted - log_z[:, None])
    grad[rows, labels] -= 1
    grad /= B
    if not np.isfinite(loss):
        raise NonFinite("cross-entropy loss is not finite")
    return loss, grad.astype(logits.dtype, copy=False)
