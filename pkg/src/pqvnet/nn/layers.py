"""From-scratch layer primitives with explicit forward/backward passes.

Data layout is channels-last: activations are (batch, height, width,
channels), convolution kernels are (k, k, in_channels, filters).  Convolution
uses "same" zero padding and stride 1 via an im2col lowering; max-pooling is
2x2 stride 2 with floor semantics (a trailing odd row/column is dropped).
Backward functions return exact gradients for the upstream gradient they are
given -- any batch averaging lives in the loss.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class LayerError(Exception):
    """Shape or argument violation in a layer primitive."""


def _pad_same(x: np.ndarray, p: int) -> np.ndarray:
    """Zero-pad the two spatial axes by ``p`` (cheaper than np.pad for hot paths)."""
    if p == 0:
        return x
    b, h, w, c = x.shape
    out = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    out[:, p : p + h, p : p + w, :] = x
    return out


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Lower (b, h, w, c) into (b*h*w, k*k*c) patch rows under same-padding."""
    xp = _pad_same(x, (k - 1) // 2)
    # windows: (b, h, w, c, k, k) -> (b, h, w, k, k, c)
    win = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    b, h, w = x.shape[:3]
    return win.reshape(b * h * w, k * k * x.shape[3])


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padded stride-1 convolution: (b,h,w,cin) x (k,k,cin,f) -> (b,h,w,f)."""
    if x.ndim != 4 or w.ndim != 4:
        raise LayerError("conv2d expects 4-D input and kernel")
    k = w.shape[0]
    if w.shape[1] != k or k % 2 == 0:
        raise LayerError("conv2d kernels must be square with odd size")
    if w.shape[2] != x.shape[3]:
        raise LayerError(f"conv2d channel mismatch: input {x.shape[3]}, kernel {w.shape[2]}")
    if b.shape != (w.shape[3],):
        raise LayerError("conv2d bias must have one entry per filter")
    bt, h, wd = x.shape[:3]
    cols = _im2col(x, k)
    y = cols @ w.reshape(-1, w.shape[3]) + b
    return y.reshape(bt, h, wd, w.shape[3])


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_input, d_kernel, d_bias) of the same-padded convolution."""
    k, f = w.shape[0], w.shape[3]
    bt, h, wd, c = x.shape
    if grad_out.shape != (bt, h, wd, f):
        raise LayerError("conv2d_backward: upstream gradient shape mismatch")
    g = grad_out.reshape(bt * h * wd, f)
    cols = _im2col(x, k)
    grad_w = (cols.T @ g).reshape(w.shape)
    grad_b = g.sum(axis=0)
    # scatter patch gradients back into the padded input
    grad_cols = (g @ w.reshape(-1, f).T).reshape(bt, h, wd, k, k, c)
    p = (k - 1) // 2
    grad_xp = np.zeros((bt, h + 2 * p, wd + 2 * p, c), dtype=x.dtype)
    for dk in range(k):
        for dl in range(k):
            grad_xp[:, dk : dk + h, dl : dl + wd, :] += grad_cols[:, :, :, dk, dl, :]
    return grad_xp[:, p : p + h, p : p + wd, :], grad_w, grad_b


def _pool_windows(x: np.ndarray) -> np.ndarray:
    """Crop to even extent and expose 2x2 windows as (b, h2, w2, c, 4) rows.

    The window axis is flattened row-major, so argmax picks the
    first-encountered maximum in row-major window order on ties.
    """
    b, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    xc = x[:, : 2 * h2, : 2 * w2, :]
    return xc.reshape(b, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h2, w2, c, 4)


def maxpool_forward(x: np.ndarray) -> np.ndarray:
    """2x2 stride-2 max pooling with floor semantics."""
    if x.ndim != 4 or x.shape[1] < 2 or x.shape[2] < 2:
        raise LayerError("maxpool expects (b,h,w,c) with h,w >= 2")
    h2, w2 = x.shape[1] // 2, x.shape[2] // 2
    xc = x[:, : 2 * h2, : 2 * w2, :]
    # elementwise max over the four strided corners; same values as the
    # window reduction in _pool_windows but without materializing windows
    return np.maximum(
        np.maximum(xc[:, 0::2, 0::2, :], xc[:, 0::2, 1::2, :]),
        np.maximum(xc[:, 1::2, 0::2, :], xc[:, 1::2, 1::2, :]),
    )


def maxpool_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Route the upstream gradient to each window's (first) maximum element."""
    b, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    if grad_out.shape != (b, h2, w2, c):
        raise LayerError("maxpool_backward: upstream gradient shape mismatch")
    win = _pool_windows(x)
    amax = win.argmax(axis=4)
    onehot = (np.arange(4) == amax[..., None]).astype(x.dtype)
    grad_win = grad_out[..., None] * onehot
    grad_crop = grad_win.reshape(b, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, 2 * h2, 2 * w2, c)
    grad_x = np.zeros_like(x)
    grad_x[:, : 2 * h2, : 2 * w2, :] = grad_crop
    return grad_x


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise LayerError("dense shape mismatch")
    return x @ w + b


def dense_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


def dropout_mask(shape: tuple[int, ...], rate: float, rng: np.random.Generator, dtype=float) -> np.ndarray:
    """Inverted-dropout mask: zero with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise LayerError("dropout rate must lie in [0, 1)")
    keep = (rng.random(shape) >= rate).astype(dtype)
    return keep / np.asarray(1.0 - rate, dtype=dtype) if rate > 0 else keep


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for overflow safety."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. probabilities back through the softmax."""
    inner = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - inner)
