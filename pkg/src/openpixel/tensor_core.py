"""Dense numeric core: the layers the OpenPixel network needs, with backward passes.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout (images) or N x F
(fully connected activations).  Every function is pure; nothing here keeps
state except the velocity buffers handed to :func:`sgd_update`.
"""
from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# OpenBLAS switches kernels for small operands, which changes the summation
# order.  Padding every product up to these sizes keeps each output row
# bit-identical whatever the batch it was computed in.
_GEMM_MIN_ROWS = 64
_GEMM_MIN_COLS = 16


class LayerGrads(NamedTuple):
    """Gradients of a parameterised layer: input, weights, bias."""

    dinput: np.ndarray
    dweights: np.ndarray
    dbias: np.ndarray


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batch-invariant ``a @ b`` for 2-D operands.

    Row ``i`` of the result only depends on row ``i`` of ``a`` and on ``b``,
    bit for bit, regardless of how many rows are multiplied together.
    """
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    m, k = a.shape
    n = b.shape[1]
    if m < _GEMM_MIN_ROWS:
        a = np.concatenate([a, np.zeros((_GEMM_MIN_ROWS - m, k), a.dtype)])
    if n < _GEMM_MIN_COLS:
        b = np.concatenate([b, np.zeros((k, _GEMM_MIN_COLS - n), b.dtype)], axis=1)
    out = a @ b
    if out.shape != (m, n):
        out = np.ascontiguousarray(out[:m, :n])
    return out


def _check_finite(name: str, *arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"{name}: non-finite values")


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if kernel <= 0:
        raise ValueError(f"kernel size must be positive, got {kernel}")
    if size < kernel:
        raise ValueError(f"spatial extent {size} smaller than window {kernel}")
    return (size - kernel) // stride + 1


def im2col(x: np.ndarray, kernel: int, stride: int, dilation: int = 1) -> np.ndarray:
    """Unfold N x C x H x W into rows of (C, kh, kw)-ordered windows.

    Returns an ``(N * OH * OW, C * kernel * kernel)`` contiguous matrix.  With
    ``dilation > 1`` the window taps are spaced ``dilation`` pixels apart.
    """
    n, c, h, w = x.shape
    span = dilation * (kernel - 1) + 1
    oh = conv_output_size(h, span, stride)
    ow = conv_output_size(w, span, stride)
    win = sliding_window_view(x, (span, span), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    win = win[..., ::dilation, ::dilation]
    # (N, C, OH, OW, K, K) -> (N, OH, OW, C, K, K)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kernel * kernel)
    return np.ascontiguousarray(cols)


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid (unpadded) 2-D cross-correlation.

    ``x`` is N x InC x H x W, ``weights`` OutC x InC x K x K, ``bias`` OutC.
    Output extent per axis is ``(in - K) // stride + 1``.
    """
    if x.ndim != 4 or weights.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weights, got {x.shape} and {weights.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weights.shape
    if kh != kw:
        raise ValueError(f"square kernels only, got {kh}x{kw}")
    if ic != c:
        raise ValueError(f"input has {c} channels but weights expect {ic}")
    if bias.shape != (oc,):
        raise ValueError(f"bias shape {bias.shape} does not match {oc} output channels")
    oh = conv_output_size(h, kh, stride)
    ow = conv_output_size(w, kw, stride)
    cols = im2col(x, kh, stride)
    out = gemm(cols, weights.reshape(oc, -1).T)
    out += bias
    return out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2).copy()


def conv2d_backward(
    x: np.ndarray, weights: np.ndarray, stride: int, upstream: np.ndarray
) -> LayerGrads:
    n, c, h, w = x.shape
    oc, _, k, _ = weights.shape
    oh = conv_output_size(h, k, stride)
    ow = conv_output_size(w, k, stride)
    if upstream.shape != (n, oc, oh, ow):
        raise ValueError(f"upstream gradient {upstream.shape} != conv output {(n, oc, oh, ow)}")
    g = upstream.transpose(0, 2, 3, 1).reshape(-1, oc)
    cols = im2col(x, k, stride)
    dweights = (g.T @ cols).reshape(weights.shape)
    dbias = g.sum(axis=0)
    dcols = (g @ weights.reshape(oc, -1)).reshape(n, oh, ow, c, k, k)
    dx = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return LayerGrads(dx, dweights, dbias)


def maxpool2d(x: np.ndarray, kernel: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Max pooling; also returns the flat in-window argmax of every output.

    Ties go to the first position of the window in row-major order.
    """
    if x.ndim != 4:
        raise ValueError(f"maxpool2d expects N x C x H x W, got {x.shape}")
    _, _, h, w = x.shape
    oh = conv_output_size(h, kernel, stride)
    ow = conv_output_size(w, kernel, stride)
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    flat = win.reshape(*win.shape[:4], kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2d_backward(
    x_shape: Sequence[int], argmax: np.ndarray, kernel: int, stride: int, upstream: np.ndarray
) -> np.ndarray:
    if upstream.shape != argmax.shape:
        raise ValueError(f"upstream gradient {upstream.shape} != pool output {argmax.shape}")
    oh, ow = argmax.shape[2:]
    dx = np.zeros(x_shape, dtype=upstream.dtype)
    for i in range(kernel):
        for j in range(kernel):
            hit = argmax == i * kernel + j
            dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += np.where(
                hit, upstream, 0
            )
    return dx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # subgradient at exactly zero is taken as 0
    return np.where(x > 0, upstream, 0).astype(upstream.dtype, copy=False)


def fully_connected(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map ``x @ weights + bias`` with ``weights`` shaped In x Out."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ValueError(f"fully_connected: cannot multiply {x.shape} by {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match {weights.shape[1]} outputs")
    out = gemm(x, weights)
    out += bias
    return out


def fully_connected_backward(x: np.ndarray, weights: np.ndarray, upstream: np.ndarray) -> LayerGrads:
    if upstream.shape != (x.shape[0], weights.shape[1]):
        raise ValueError(f"upstream gradient {upstream.shape} != {(x.shape[0], weights.shape[1])}")
    return LayerGrads(upstream @ weights.T, x.T @ upstream, upstream.sum(axis=0))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns ``(loss, probs, dlogits)`` where ``dlogits`` is the gradient of
    the mean loss.
    """
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = probs.copy()
    grad[rows, labels] -= 1
    grad /= n
    return loss, probs, grad


def sgd_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    velocity: dict[str, np.ndarray],
) -> None:
    """In-place SGD with heavy-ball momentum: ``v = m*v + g``; ``w -= lr*v``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {w.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(w)
        v *= momentum
        v += g
        w -= lr * v


def finite_difference_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic: np.ndarray,
    eps: float = 1e-3,
    indices: Sequence[int] | None = None,
) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-12)``.  ``indices`` restricts the check to a
    subset of flat coordinates (useful for big parameter tensors).
    """
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ValueError(f"analytic gradient {analytic.shape} != point {x.shape}")
    _check_finite("finite_difference_check", x, analytic)
    flat = x.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"function not finite near coordinate {i}")
        num = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - num) / max(abs(a), abs(num), 1e-12)
        worst = max(worst, err)
    return worst
