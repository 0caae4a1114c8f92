"""Dense float64 numeric kernels with hand-derived gradients.

Everything here is a pure function of its inputs. All arrays are float64;
backward passes are written by hand and are verified against central finite
differences in the test suite.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, ValidationError

# ---------------------------------------------------------------------------
# basic linear algebra
# ---------------------------------------------------------------------------


def as_f64(x) -> np.ndarray:
    """Coerce to a float64 ndarray without copying when already one."""
    return np.asarray(x, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b with an explicit inner-dimension check."""
    a = as_f64(a)
    b = as_f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


# ---------------------------------------------------------------------------
# convolution (cross-correlation, zero padding) and 2x2 max pooling
# ---------------------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv output size not integral: input {size}, kernel {k}, "
            f"stride {stride}, padding {padding}"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int):
    """Extract (N, H', W', C*k*k) patches from padded input (N, C, Hp, Wp)."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, H', W', k, k)
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * k * k)
    return cols, ho, wo


def conv2d(x: np.ndarray, kernels: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate x with kernels (no kernel flip), zero padding.

    x: (C_in, H, W) or (N, C_in, H, W); kernels: (C_out, C_in, k, k).
    Returns (C_out, H', W') or (N, C_out, H', W').
    """
    x = as_f64(x)
    kernels = as_f64(kernels)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects (N,C,H,W) and (O,C,k,k), got {x.shape}, {kernels.shape}")
    n, c, h, w = x.shape
    c_out, c_k, kh, kw = kernels.shape
    if kh != kw or kh < 1:
        raise ShapeError(f"conv2d kernels must be square and non-empty, got {kernels.shape}")
    if c_k != c:
        raise ShapeError(f"conv2d channel mismatch: input {c} vs kernel {c_k}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _im2col(xp, kh, stride)
    out = cols.reshape(n * ho * wo, -1) @ kernels.reshape(c_out, -1).T
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    return out[0] if single else out


def conv2d_backward(
    x: np.ndarray,
    kernels: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    padding: int = 0,
):
    """Gradients of conv2d w.r.t. input and kernels given d(loss)/d(output)."""
    x = as_f64(x)
    kernels = as_f64(kernels)
    grad_out = as_f64(grad_out)
    single = x.ndim == 3
    if single:
        x = x[None]
        grad_out = grad_out[None]
    n, c, h, w = x.shape
    c_out, _, k, _ = kernels.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _im2col(xp, k, stride)

    g = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
    grad_k = (g.T @ cols.reshape(n * ho * wo, -1)).reshape(kernels.shape)

    gcols = (g @ kernels.reshape(c_out, -1)).reshape(n, ho, wo, c, k, k)
    gxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    gx = gxp[:, :, padding : padding + h, padding : padding + w]
    if single:
        gx = gx[0]
    return gx, grad_k


def maxpool2(x: np.ndarray):
    """2x2 non-overlapping max pool; ties go to the smallest flat index.

    Returns (pooled, idx) where idx in {0..3} records the argmax position
    inside each window for the backward pass.
    """
    x = as_f64(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if single:
        return out[0], idx[0]
    return out, idx


def maxpool2_backward(grad_out: np.ndarray, idx: np.ndarray, input_shape) -> np.ndarray:
    """Scatter pooled gradients back to the positions recorded by maxpool2."""
    grad_out = as_f64(grad_out)
    single = grad_out.ndim == 3
    if single:
        grad_out = grad_out[None]
        idx = idx[None]
    n, c, ho, wo = grad_out.shape
    win = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(win, idx[..., None], grad_out[..., None], axis=-1)
    gx = win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    if gx.shape[1:] != tuple(input_shape[-3:]):
        raise ShapeError(f"maxpool2_backward shape mismatch: {gx.shape} vs {input_shape}")
    return gx[0] if single else gx


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x):
    return np.maximum(x, 0.0)


def relu_deriv(x):
    return (x > 0).astype(np.float64)


def tanh_deriv(x):
    t = np.tanh(x)
    return 1.0 - t * t


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_deriv(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def identity(x):
    return x


def identity_deriv(x):
    return np.ones_like(x)


# name -> (f, f') used by the settling dynamics; identity exists for the
# closed-form linear fixed-point tests
ACTIVATIONS = {
    "tanh": (np.tanh, tanh_deriv),
    "sigmoid": (sigmoid, sigmoid_deriv),
    "identity": (identity, identity_deriv),
}


# ---------------------------------------------------------------------------
# softmax cross-entropy
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-stabilized softmax over the last axis."""
    logits = as_f64(logits)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def onehot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 0:
        labels = labels[None]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValidationError(f"labels outside 0..{k - 1}")
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def softmax_xent(logits: np.ndarray, target_onehot: np.ndarray):
    """Cross-entropy of softmax(logits) against a one-hot target.

    Returns (loss, grad_logits) with grad = softmax(logits) - onehot.
    """
    logits = as_f64(logits)
    t = as_f64(target_onehot)
    if logits.shape != t.shape:
        raise ShapeError(f"logits {logits.shape} vs onehot {t.shape}")
    flat = t.reshape(-1, t.shape[-1])
    ok = np.all(np.isin(flat, (0.0, 1.0))) and np.all(flat.sum(axis=-1) == 1.0)
    if not ok:
        raise ValidationError("target is not one-hot")
    p = softmax(logits)
    # -log p[true], computed from the stabilized logits to avoid log(0)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = -(t * logp).sum(axis=-1)
    grad = p - t
    if logits.ndim == 1:
        return float(loss), grad
    return loss, grad


def batch_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch plus d(mean loss)/d(logits)."""
    t = onehot(labels, logits.shape[-1])
    loss, grad = softmax_xent(logits, t)
    n = logits.shape[0]
    return float(np.mean(loss)), grad / n


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def grad_check(f, x: np.ndarray, analytic_grad: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between analytic_grad and central differences of f.

    Error metric per coordinate: |analytic - numeric| / max(1, |numeric|).
    """
    x = as_f64(x).copy()
    analytic_grad = as_f64(analytic_grad)
    if x.shape != analytic_grad.shape:
        raise ShapeError(f"x {x.shape} vs grad {analytic_grad.shape}")
    flat = x.reshape(-1)
    gflat = analytic_grad.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * step)
        err = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


def grad_check_sampled(f, x, analytic_grad, n_coords: int = 64, seed: int = 0, step: float = 1e-5) -> float:
    """grad_check restricted to a random coordinate subset (for large tensors)."""
    x = as_f64(x).copy()
    flat = x.reshape(-1)
    gflat = as_f64(analytic_grad).reshape(-1)
    rng = np.random.default_rng(seed)
    coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * step)
        err = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
