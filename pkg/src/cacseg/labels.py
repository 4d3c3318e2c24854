"""Label maps: the IGNORE marker, per-class binary masks, grid reduction."""

from __future__ import annotations

import numpy as np

IGNORE = -1


def check_labels(y: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {y.dtype}")
    bad = (y != IGNORE) & ((y < 0) | (y >= n_classes))
    if bad.any():
        raise ValueError(f"label values outside 0..{n_classes - 1} and IGNORE: {np.unique(y[bad])}")
    return y.astype(np.int64, copy=False)


def valid_mask(y: np.ndarray) -> np.ndarray:
    """1.0 where the label is a real class, 0.0 at IGNORE pixels."""
    return (np.asarray(y) != IGNORE).astype(np.float64)


def class_masks(y: np.ndarray, n_classes: int) -> np.ndarray:
    """Binary masks ``[..., n, hw]`` with ``masks[k, j] = (y[j] == k)``.

    IGNORE pixels are zero in every mask.
    """
    y = np.asarray(y)
    return (y[..., None, :] == np.arange(n_classes)[:, None]).astype(np.float64)


def one_hot(y: np.ndarray, n_classes: int) -> np.ndarray:
    """Pixel-major one-hot ``[..., hw, n]``; IGNORE rows are all zero."""
    return np.swapaxes(class_masks(y, n_classes), -1, -2)


def downsample_labels(y: np.ndarray, h: int, w: int, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour reduction of a flattened ``h x w`` label map to ``out_h x out_w``."""
    y = np.asarray(y).reshape(*np.shape(y)[:-1], h, w)
    rows = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(int)
    cols = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(int)
    out = y[..., rows[:, None], cols[None, :]]
    return out.reshape(*out.shape[:-2], out_h * out_w)
