"""Classical sliding-window image filters and the cosine similarity metric.

Filters apply per channel with edge-replicated borders, so outputs stay in
[0,1] whenever inputs do.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .numkernel import as_f64

FILTER_KINDS = ("box", "gaussian", "median", "min", "max", "mode")


@dataclass
class FilterSpec:
    kind: str = "gaussian"
    kernel_size: int = 3
    gaussian_sigma: float | None = None  # defaults to kernel_size / 3

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ValidationError(f"unknown filter kind {self.kind!r}")
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValidationError(f"kernel_size must be odd and >= 3, got {self.kernel_size}")
        if self.gaussian_sigma is None:
            self.gaussian_sigma = self.kernel_size / 3.0


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Sampled 2-d Gaussian, normalized to sum exactly 1."""
    r = np.arange(size) - size // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def _windows(channel: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    padded = np.pad(channel, pad, mode="edge")
    return np.lib.stride_tricks.sliding_window_view(padded, (k, k))


def _mode_window(flat_u8: np.ndarray) -> int:
    return int(np.bincount(flat_u8, minlength=256).argmax())


def _filter_channel(channel: np.ndarray, spec: FilterSpec) -> np.ndarray:
    k = spec.kernel_size
    win = _windows(channel, k)
    if spec.kind == "box":
        return win.mean(axis=(-2, -1))
    if spec.kind == "gaussian":
        return np.tensordot(win, gaussian_kernel(k, spec.gaussian_sigma), axes=((-2, -1), (0, 1)))
    if spec.kind == "median":
        return np.median(win, axis=(-2, -1))
    if spec.kind == "min":
        return win.min(axis=(-2, -1))
    if spec.kind == "max":
        return win.max(axis=(-2, -1))
    # mode: vote over 256 quantized levels; bincount.argmax returns the
    # smallest value on ties
    q = np.rint(win * 255.0).astype(np.int64).reshape(win.shape[0], win.shape[1], -1)
    out = np.empty(win.shape[:2])
    for i in range(q.shape[0]):
        for j in range(q.shape[1]):
            out[i, j] = _mode_window(q[i, j])
    return out / 255.0


def apply_filter(image: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """Filter an (H,W) or (C,H,W) image; output clipped to [0,1]."""
    image = as_f64(image)
    if image.ndim == 2:
        return np.clip(_filter_channel(image, spec), 0.0, 1.0)
    if image.ndim == 3:
        return np.clip(np.stack([_filter_channel(c, spec) for c in image]), 0.0, 1.0)
    raise ValidationError(f"expected (H,W) or (C,H,W), got {image.shape}")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two flattened images."""
    a = as_f64(a).reshape(-1)
    b = as_f64(b).reshape(-1)
    if a.shape != b.shape:
        raise ValidationError(f"cosine operands differ in size: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine of a zero vector is undefined")
    return float(a @ b / (na * nb))
