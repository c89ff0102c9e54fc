"""Array-level network primitives with explicit forward and backward passes.

Activations are (B, C, H, W) arrays; every ``*_forward`` returns the output
plus the cache its matching ``*_backward`` needs.  All operations preserve
the input dtype, so the same code runs in float32 for training and float64
for finite-difference checks.

Convolution and max pooling are built on im2col windows and BLAS matmuls;
the col2im scatter in the backward pass loops only over the kernel taps.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError


def check_finite(x: np.ndarray, where: str) -> None:
    """Raise NumericError naming ``where`` if ``x`` has a NaN or infinity."""
    # a single-scan probe: any NaN or infinity survives into the sum
    if not np.isfinite(float(x.sum(dtype=np.float64))):
        raise NumericError(f"non-finite activations in layer '{where}'")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _window_cols(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B, Ho, Wo, C, kh, kw) strided window view."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0
):
    """y[n,o] = sum_{c,i,j} w[o,c,i,j] * x[n,c,si+i,sj+j] + b[o]."""
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = w.shape
    assert Cin == C, (Cin, C)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    Hp, Wp = xp.shape[2:]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    cols = _window_cols(xp, kh, kw, stride).reshape(B * Ho * Wo, C * kh * kw)
    y = cols @ w.reshape(Cout, -1).T
    y += b
    y = np.ascontiguousarray(y.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))
    cache = (cols, x.shape, (Hp, Wp), w, stride, pad)
    return y, cache


def conv2d_backward(dy: np.ndarray, cache):
    cols, x_shape, (Hp, Wp), w, stride, pad = cache
    B, C, H, W = x_shape
    Cout, _, kh, kw = w.shape
    Ho, Wo = dy.shape[2:]
    dy_m = dy.transpose(0, 2, 3, 1).reshape(-1, Cout)
    dw = (dy_m.T @ cols).reshape(w.shape)
    db = dy_m.sum(axis=0)
    dcols = dy_m @ w.reshape(Cout, -1)
    dxp = np.zeros((B, C, Hp, Wp), dtype=dy.dtype)
    dc = dcols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += dc[
                :, :, :, :, i, j
            ]
    dx = dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp
    return dx, dw, db


# ---------------------------------------------------------------------------
# Pointwise and pooling
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x > 0


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


def maxpool_forward(x: np.ndarray, k: int = 2, stride: int = 2, pad: int = 0):
    """Max over k-by-k windows; ties resolve to the first window position.

    "First" means lowest row-major position within the window, so the
    specialized 2x2/stride-2 path and the general windowed path agree
    exactly on tied inputs.
    """
    B, C, H, W = x.shape
    if k == 2 and stride == 2 and pad == 0 and H % 2 == 0 and W % 2 == 0:
        # the hot configuration: compare four strided quarter views directly
        y = np.maximum(
            np.maximum(x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2]),
            np.maximum(x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]),
        )
        cache = ("2x2", x, y)
        return y, cache
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    else:
        xp = x
    Hp, Wp = xp.shape[2:]
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    win = _window_cols(xp, k, k, stride)  # (B, Ho, Wo, C, k, k)
    flat = win.reshape(B, Ho, Wo, C, k * k)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    cache = ("gen", idx, x.shape, (Hp, Wp), k, stride, pad)
    return y, cache


def maxpool_backward(dy: np.ndarray, cache) -> np.ndarray:
    if cache[0] == "2x2":
        _, x, y = cache
        dx = np.zeros_like(x)
        taken = np.zeros(y.shape, dtype=bool)
        for di in (0, 1):
            for dj in (0, 1):
                view = x[:, :, di::2, dj::2]
                hit = (view == y) & ~taken
                dx[:, :, di::2, dj::2] = dy * hit
                taken |= hit
        return dx
    _, idx, x_shape, (Hp, Wp), k, stride, pad = cache
    B, C, H, W = x_shape
    Ho, Wo = dy.shape[2:]
    dxp = np.zeros((B, C, Hp, Wp), dtype=dy.dtype)
    idx_cf = idx.transpose(0, 3, 1, 2)  # (B, C, Ho, Wo)
    for t in range(k * k):
        di, dj = divmod(t, k)
        contrib = dy * (idx_cf == t)
        dxp[:, :, di : di + Ho * stride : stride, dj : dj + Wo * stride : stride] += contrib
    return dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp


def global_avg_pool_forward(x: np.ndarray):
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dz: np.ndarray, x_shape) -> np.ndarray:
    B, C, H, W = x_shape
    scale = np.asarray(1.0 / (H * W), dtype=dz.dtype)
    return np.broadcast_to((dz * scale)[:, :, None, None], x_shape).copy()


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, x


def dense_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


# ---------------------------------------------------------------------------
# Batch normalization (per channel of a 4-D activation)
# ---------------------------------------------------------------------------

BN_EPS = 1e-5


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    momentum: float = 0.1,
):
    """Returns (y, cache, new_running_mean, new_running_var).

    Training mode normalizes by batch statistics and returns updated running
    stats (unbiased variance, torch convention); eval mode uses the running
    stats as-is and supports no backward pass (cache is None).
    """
    g = gamma[None, :, None, None]
    be = beta[None, :, None, None]
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        invstd = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean[None, :, None, None]) * invstd[None, :, None, None]
        n = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (n / max(n - 1, 1))
        new_mean = (1 - momentum) * running_mean + momentum * mean
        new_var = (1 - momentum) * running_var + momentum * unbiased
        cache = (xhat, invstd, gamma)
        return g * xhat + be, cache, new_mean.astype(x.dtype), new_var.astype(x.dtype)
    invstd = 1.0 / np.sqrt(running_var + BN_EPS)
    xhat = (x - running_mean[None, :, None, None]) * invstd[None, :, None, None]
    return g * xhat + be, None, running_mean, running_var


def batchnorm_backward(dy: np.ndarray, cache):
    if cache is None:
        raise RuntimeError("batchnorm backward requires a training-mode forward")
    xhat, invstd, gamma = cache
    B, C, H, W = dy.shape
    n = B * H * W
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    dx = (invstd[None, :, None, None] / n) * (n * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Softmax head
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
