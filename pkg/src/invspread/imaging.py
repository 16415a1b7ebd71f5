"""Pixel-level helpers on C×H×W float images."""

from __future__ import annotations

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])


def _axis_weights(n_in: int, n_out: int, start: float, length: float):
    # half-pixel centres, clamped to the sampled region
    step = length / n_out
    src = start + (np.arange(n_out) + 0.5) * step - 0.5
    last = min(start + length, n_in) - 1
    src = np.clip(src, start, last)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, int(last))
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int, box=None) -> np.ndarray:
    """Bilinearly resample ``img`` (or the ``box=(top, left, h, w)`` region of it).

    Sampling uses pixel-centre alignment, so resampling a full image to its own
    size returns it unchanged.
    """
    C, H, W = img.shape
    top, left, h, w = box if box is not None else (0, 0, H, W)
    y0, y1, fy = _axis_weights(H, out_h, float(top), float(h))
    x0, x1, fx = _axis_weights(W, out_w, float(left), float(w))
    rows = img[:, y0, :] * (1 - fy)[None, :, None] + img[:, y1, :] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx)[None, None, :] + rows[:, :, x1] * fx[None, None, :]


def grayscale(img: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma of an RGB image, shape 1×H×W."""
    return np.tensordot(LUMA.astype(img.dtype), img, axes=([0], [0]))[None]
