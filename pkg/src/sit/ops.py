"""Forward/backward pairs for the fixed set of primitives the model composes.

All arrays are float64 numpy arrays.  Ops act on trailing axes so a leading
batch axis passes through untouched.  Backward functions take the upstream
gradient plus whatever forward inputs they need and return input gradients.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidKernel, InvalidRate, ShapeMismatch
from .rng import RngStream

LN_EPS = 1e-5


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def order_free_sum(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum along ``axis`` whose bits do not depend on the order of the entries.

    Float addition is not associative, so a plain sum over permuted terms can
    differ in the last bit.  Sorting first makes the summation order a function
    of the multiset of terms alone.
    """
    return np.sort(a, axis=axis).sum(axis=axis)


# -- matmul -------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` over the last two axes of ``a``."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(dc: np.ndarray, a: np.ndarray, b: np.ndarray):
    da = dc @ b.T
    a2 = a.reshape(-1, a.shape[-1])
    db = a2.T @ dc.reshape(-1, dc.shape[-1])
    return da, db


# -- convolution --------------------------------------------------------------

def _check_conv(x: np.ndarray, k: np.ndarray, b: np.ndarray | None):
    if k.ndim != 4 or k.shape[0] != k.shape[1]:
        raise InvalidKernel(f"kernel must be k x k x Cin x Cout, got {k.shape}")
    if k.shape[0] % 2 == 0:
        raise InvalidKernel(f"kernel size must be odd, got {k.shape[0]}")
    if x.ndim not in (3, 4):
        raise ShapeMismatch(f"conv input must be H x W x C (optionally batched), got {x.shape}")
    if x.shape[-1] != k.shape[2]:
        raise ShapeMismatch(f"input has {x.shape[-1]} channels, kernel expects {k.shape[2]}")
    if b is not None and b.shape != (k.shape[3],):
        raise ShapeMismatch(f"bias shape {b.shape} does not match Cout={k.shape[3]}")


def _out_extent(n: int, stride: int) -> int:
    return (n + stride - 1) // stride


def _im2col(x: np.ndarray, ksize: int, stride: int) -> np.ndarray:
    # x: N x H x W x C -> N x Ho x Wo x (k*k*C), patch order (di, dj, c)
    n, h, w, c = x.shape
    pad = (ksize - 1) // 2
    ho, wo = _out_extent(h, stride), _out_extent(w, stride)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((n, ho, wo, ksize, ksize, c))
    for di in range(ksize):
        for dj in range(ksize):
            cols[:, :, :, di, dj, :] = xp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :]
    return cols.reshape(n, ho, wo, ksize * ksize * c)


def _col2im(dcols: np.ndarray, x_shape, ksize: int, stride: int) -> np.ndarray:
    n, h, w, c = x_shape
    pad = (ksize - 1) // 2
    ho, wo = dcols.shape[1], dcols.shape[2]
    dcols = dcols.reshape(n, ho, wo, ksize, ksize, c)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    for di in range(ksize):
        for dj in range(ksize):
            dxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += dcols[:, :, :, di, dj, :]
    return dxp[:, pad:pad + h, pad:pad + w, :]


def conv2d(x: np.ndarray, k: np.ndarray, b: np.ndarray | None = None, stride: int = 1,
           return_cols: bool = False):
    """Zero-padded ("same") 2-D convolution, channels last.

    The output has ``ceil(H / stride) x ceil(W / stride)`` positions; at stride 1
    the spatial extents of the input are preserved.  ``return_cols`` also hands
    back the patch matrix so a later backward can skip rebuilding it.
    """
    x, k = as_tensor(x), as_tensor(k)
    b = None if b is None else as_tensor(b)
    _check_conv(x, k, b)
    single = x.ndim == 3
    xb = x[None] if single else x
    ksize, cout = k.shape[0], k.shape[3]
    cols = _im2col(xb, ksize, stride)
    y = cols @ k.reshape(-1, cout)
    if b is not None:
        y = y + b
    y = y[0] if single else y
    return (y, cols) if return_cols else y


def conv2d_same(x: np.ndarray, k: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    return conv2d(x, k, b, stride=1)


def conv2d_backward(dy: np.ndarray, x: np.ndarray, k: np.ndarray, stride: int = 1, cols=None):
    """Returns ``(dx, dk, db)``."""
    single = x.ndim == 3
    xb = x[None] if single else x
    dyb = dy[None] if single else dy
    ksize, cout = k.shape[0], k.shape[3]
    if cols is None:
        cols = _im2col(xb, ksize, stride)
    dy2 = dyb.reshape(-1, cout)
    dk = (cols.reshape(-1, cols.shape[-1]).T @ dy2).reshape(k.shape)
    db = dy2.sum(axis=0)
    dcols = dyb @ k.reshape(-1, cout).T
    dx = _col2im(dcols, xb.shape, ksize, stride)
    return (dx[0] if single else dx), dk, db


# -- activations --------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0.0, dy, 0.0)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis.

    Permuting the entries of a row permutes the output bitwise.
    """
    x = as_tensor(x)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / order_free_sum(e, axis=-1)[..., None]


def softmax_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Jacobian-vector product given the softmax *output* ``y``."""
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


# -- normalization ------------------------------------------------------------

def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Per-row normalization with population variance, then affine."""
    x = as_tensor(x)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeMismatch(f"gamma/beta {gamma.shape}/{beta.shape} vs width {x.shape[-1]}")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def layer_norm_backward(dy: np.ndarray, x: np.ndarray, gamma: np.ndarray, eps: float = LN_EPS):
    """Returns ``(dx, dgamma, dbeta)``."""
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    flat = dy.reshape(-1, dy.shape[-1])
    dgamma = (flat * xhat.reshape(flat.shape)).sum(axis=0)
    dbeta = flat.sum(axis=0)
    g = dy * gamma
    dx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


# -- spatial pooling ----------------------------------------------------------

def global_avg_pool_hw(x: np.ndarray) -> np.ndarray:
    return as_tensor(x).mean(axis=(-3, -2))


def global_avg_pool_backward(dy: np.ndarray, x_shape) -> np.ndarray:
    h, w = x_shape[-3], x_shape[-2]
    return np.broadcast_to(dy[..., None, None, :] / (h * w), x_shape).copy()


def global_max_pool_hw(x: np.ndarray) -> np.ndarray:
    return as_tensor(x).max(axis=(-3, -2))


def global_max_pool_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Routes each channel's gradient to its first maximum in row-major (h, w) order."""
    lead = x.shape[:-3]
    h, w, c = x.shape[-3:]
    flat = x.reshape(*lead, h * w, c)
    idx = flat.argmax(axis=-2)  # argmax returns the first occurrence
    dflat = np.zeros_like(flat)
    np.put_along_axis(dflat, idx[..., None, :], dy[..., None, :], axis=-2)
    return dflat.reshape(x.shape)


# -- dropout ------------------------------------------------------------------

def check_rate(rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {rate}")


def dropout_mask(shape, rate: float, rng: RngStream) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else ``1/(1-rate)``."""
    check_rate(rate)
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.uniform(shape) >= rate
    return keep / (1.0 - rate)


def dropout(x: np.ndarray, rate: float, train: bool, rng: RngStream | None = None) -> np.ndarray:
    check_rate(rate)
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    return x * dropout_mask(x.shape, rate, rng)


# -- attention ----------------------------------------------------------------

def scaled_dot_product_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, return_weights: bool = False):
    """``softmax(q k^T / sqrt(d_k)) v`` over the last two axes.

    The weighted sum over keys is order-free, so permuting the key/value rows
    together leaves every output bit unchanged.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])
    weights = softmax_rows(scores)
    out = order_free_sum(weights[..., :, :, None] * v[..., None, :, :], axis=-2)
    return (out, weights) if return_weights else out


def attention_backward(dout: np.ndarray, q: np.ndarray, k: np.ndarray, v: np.ndarray, weights: np.ndarray):
    """Returns ``(dq, dk, dv)``."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    dv = np.swapaxes(weights, -1, -2) @ dout
    dw = dout @ np.swapaxes(v, -1, -2)
    ds = softmax_backward(dw, weights) * scale
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    return dq, dk, dv
