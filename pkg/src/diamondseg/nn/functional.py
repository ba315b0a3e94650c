"""Stateless forward/backward kernels on ``(N, C, H, W)`` arrays.

Each ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
consumes the upstream gradient and the cache.  All kernels work in whatever
float dtype they are given, so gradient checks run them in float64.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import ClassOutOfRange, DegenerateBatch, InvalidFactor, ShapeMismatch
from ..interp import linear_matrix

UPSAMPLE_FACTORS = (2, 4, 8, 16)


def same_padding(k: int, dilation: int) -> int:
    return dilation * (k - 1) // 2


def _out_size(n: int, k: int, stride: int, dilation: int, pad: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, dilation * sh, dilation * sw, stride * sh, stride * sw),
        writeable=False,
    )


def _col2im(dwin: np.ndarray, xp_shape, k: int, stride: int, dilation: int, dtype) -> np.ndarray:
    """Scatter-add window gradients ``(N, C, k, k, Ho, Wo)`` back onto the padded input."""
    dxp = np.zeros(xp_shape, dtype=dtype)
    ho, wo = dwin.shape[4], dwin.shape[5]
    for u in range(k):
        r0 = u * dilation
        for v in range(k):
            c0 = v * dilation
            dxp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += dwin[:, :, u, v]
    return dxp


def _unpad(a: np.ndarray, pad: int) -> np.ndarray:
    return a[:, :, pad:-pad, pad:-pad] if pad else a


# ------------------------------------------------------------------ conv2d


def conv2d_forward(x, weight, bias=None, stride=1, dilation=1, padding=None):
    """Dense 2-D convolution (cross-correlation) with zero padding.

    ``y[n,o,i,j] = b[o] + sum_{c,u,v} x[n,c, i*s + d*u - p, j*s + d*v - p] * w[o,c,u,v]``
    """
    n, c, h, w = x.shape
    o, cw, k, k2 = weight.shape
    if cw != c or k != k2:
        raise ShapeMismatch(f"weight {weight.shape} incompatible with input {x.shape}")
    if dilation < 1 or stride < 1:
        raise ShapeMismatch("stride and dilation must be >= 1")
    pad = same_padding(k, dilation) if padding is None else padding
    ho, wo = _out_size(h, k, stride, dilation, pad), _out_size(w, k, stride, dilation, pad)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"effective kernel does not fit input {x.shape}")
    if k == 1 and stride == 1 and pad == 0:
        cols = x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
        xp_shape = None
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x)
        xp_shape = xp.shape
        win = _windows(xp, k, stride, dilation, ho, wo)
        cols = win.transpose(1, 2, 3, 0, 4, 5).reshape(c * k * k, n * ho * wo)
    y = weight.reshape(o, -1) @ cols
    if bias is not None:
        y += bias[:, None]
    y = y.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    cache = (x.shape, xp_shape, cols, weight, stride, dilation, pad, bias is not None)
    return np.ascontiguousarray(y), cache


def conv2d_backward(dy, cache):
    """Return ``(dx, dweight, dbias)``; ``dbias`` is None for bias-free convs."""
    x_shape, xp_shape, cols, weight, stride, dilation, pad, has_bias = cache
    n, c, h, w = x_shape
    o, _, k, _ = weight.shape
    ho, wo = dy.shape[2], dy.shape[3]
    dy_m = dy.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
    dweight = (dy_m @ cols.T).reshape(weight.shape)
    dbias = dy_m.sum(axis=1) if has_bias else None
    dcols = weight.reshape(o, -1).T @ dy_m
    if xp_shape is None:
        dx = dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    else:
        dwin = dcols.reshape(c, k, k, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
        dx = _unpad(_col2im(dwin, xp_shape, k, stride, dilation, dy.dtype), pad)
    return np.ascontiguousarray(dx), dweight, dbias


# --------------------------------------------------------------- depthwise


def depthwise_conv2d_forward(x, weight, bias=None, stride=1, dilation=1, padding=None):
    """One ``k x k`` filter per channel; ``weight`` has shape ``(C, 1, k, k)``."""
    n, c, h, w = x.shape
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise ShapeMismatch(f"depthwise weight {weight.shape} incompatible with input {x.shape}")
    k = weight.shape[2]
    pad = same_padding(k, dilation) if padding is None else padding
    ho, wo = _out_size(h, k, stride, dilation, pad), _out_size(w, k, stride, dilation, pad)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"effective kernel does not fit input {x.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(np.ascontiguousarray(xp), k, stride, dilation, ho, wo)
    y = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            y += win[:, :, u, v] * weight[None, :, 0, u, v, None, None]
    if bias is not None:
        y += bias[None, :, None, None]
    cache = (x.shape, xp, weight, stride, dilation, pad, bias is not None)
    return y, cache


def depthwise_conv2d_backward(dy, cache):
    x_shape, xp, weight, stride, dilation, pad, has_bias = cache
    k = weight.shape[2]
    ho, wo = dy.shape[2], dy.shape[3]
    win = _windows(np.ascontiguousarray(xp), k, stride, dilation, ho, wo)
    dweight = np.empty_like(weight)
    dwin = np.empty(win.shape, dtype=dy.dtype)
    for u in range(k):
        for v in range(k):
            dweight[:, 0, u, v] = np.einsum("nchw,nchw->c", dy, win[:, :, u, v])
            dwin[:, :, u, v] = dy * weight[None, :, 0, u, v, None, None]
    dbias = dy.sum(axis=(0, 2, 3)) if has_bias else None
    dx = _unpad(_col2im(dwin, xp.shape, k, stride, dilation, dy.dtype), pad)
    return np.ascontiguousarray(dx), dweight, dbias


def depthwise_separable_conv(x, depthwise_weight, pointwise_weight, stride=1, dilation=1,
                             depthwise_bias=None, pointwise_bias=None):
    """Channelwise spatial conv followed by a 1x1 channel mix (forward only)."""
    if pointwise_weight.shape[2:] != (1, 1):
        raise ShapeMismatch("pointwise weight must be 1x1")
    mid, _ = depthwise_conv2d_forward(x, depthwise_weight, depthwise_bias, stride, dilation)
    y, _ = conv2d_forward(mid, pointwise_weight, pointwise_bias)
    return y


def separable_param_count(c_in: int, c_out: int, k: int) -> int:
    return c_in * k * k + c_in * c_out


# --------------------------------------------------------------- batchnorm


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, momentum=0.9, eps=1e-5):
    """Per-channel batch normalization.

    In train mode the batch statistics are used and the running buffers are
    updated in place (``running = momentum * running + (1 - momentum) * batch``).
    """
    n, c, h, w = x.shape
    if train:
        count = n * h * w
        if count < 2:
            raise DegenerateBatch("batchnorm needs N*H*W >= 2 in train mode")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (count / (count - 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y.astype(x.dtype, copy=False), (xhat, inv_std, gamma, train)


def batchnorm_backward(dy, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = np.einsum("nchw,nchw->c", dy, xhat)
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if not train:
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    s2 = np.einsum("nchw,nchw->c", dxhat, xhat)[None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
    return dx.astype(dy.dtype, copy=False), dgamma, dbeta


# ------------------------------------------------------------ activations


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def softmax_per_pixel(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_per_pixel(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_backward(dprob, prob):
    return prob * (dprob - (dprob * prob).sum(axis=1, keepdims=True))


# --------------------------------------------------------------- resampling


def resize_bilinear_forward(x, out_h, out_w):
    mh = linear_matrix(x.shape[2], out_h, x.dtype)
    mw = linear_matrix(x.shape[3], out_w, x.dtype)
    y = np.matmul(np.matmul(mh, x), mw.T)
    return y, (mh, mw)


def resize_bilinear_backward(dy, cache):
    mh, mw = cache
    return np.matmul(np.matmul(mh.T, dy), mw)


def bilinear_upsample(x, factor):
    """Half-pixel-center bilinear upsampling by an integer factor; returns ``(y, cache)``."""
    if factor not in UPSAMPLE_FACTORS:
        raise InvalidFactor(f"factor {factor} not in {UPSAMPLE_FACTORS}")
    return resize_bilinear_forward(x, x.shape[2] * factor, x.shape[3] * factor)


def bilinear_upsample_backward(dy, cache):
    return resize_bilinear_backward(dy, cache)


def global_avg_pool_forward(x):
    return x.mean(axis=(2, 3), keepdims=True), x.shape


def global_avg_pool_backward(dy, x_shape):
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(dy / (h * w), x_shape).copy()


# ------------------------------------------------------------------- losses


def _check_targets(logits, mask):
    if mask.ndim == 2:
        mask = mask[None]
    n, c, h, w = logits.shape
    if mask.shape != (n, h, w):
        raise ShapeMismatch(f"mask {mask.shape} vs logits {logits.shape}")
    if mask.size and (mask.min() < 0 or mask.max() >= c):
        raise ClassOutOfRange(f"mask holds classes outside [0, {c})")
    return mask.astype(np.int64)


def _true_class_logprob(logits, target):
    logp = log_softmax_per_pixel(logits)
    picked = np.take_along_axis(logp, target[:, None], axis=1)[:, 0]
    return logp, picked


def cross_entropy_loss(logits, mask):
    """Mean per-pixel ``-log softmax(logits)[gt]``; returns ``(loss, dlogits)``."""
    target = _check_targets(logits, mask)
    logp, picked = _true_class_logprob(logits, target)
    count = picked.size
    loss = -picked.sum() / count
    grad = np.exp(logp)
    np.put_along_axis(grad, target[:, None], np.take_along_axis(grad, target[:, None], axis=1) - 1.0, axis=1)
    return float(loss), (grad / count).astype(logits.dtype, copy=False)


def focal_loss(logits, mask, gamma=2.0, alpha=None):
    """Mean per-pixel ``-alpha_c * (1 - p_t)**gamma * log(p_t)``; returns ``(loss, dlogits)``."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    target = _check_targets(logits, mask)
    c = logits.shape[1]
    alpha = np.ones(c) if alpha is None else np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (c,) or np.any(alpha <= 0):
        raise ValueError("alpha must hold one positive weight per class")
    logp, picked = _true_class_logprob(logits, target)
    p_t = np.exp(picked)
    q = -np.expm1(picked)  # 1 - p_t without cancellation
    a = alpha[target]
    qg = q ** gamma
    count = picked.size
    loss = -(a * qg * picked).sum() / count
    # d/dz_j = -a (delta_tj - p_j) * q^gamma * (1 + gamma * p_t * (-log p_t) / q)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(q > 0, -picked / q, 1.0)
    scale = a * qg * (1.0 + gamma * p_t * ratio) / count
    grad = np.exp(logp)
    np.put_along_axis(grad, target[:, None], np.take_along_axis(grad, target[:, None], axis=1) - 1.0, axis=1)
    grad *= scale[:, None]
    return float(loss), grad.astype(logits.dtype, copy=False)
