"""Input validation for image batches and label maps."""

from __future__ import annotations

import numpy as np


def check_images(X, multiple_of: int = 16) -> np.ndarray:
    """Return a float32 (n, 3, H, W) batch with values in [0, 1].

    Accepts channel-first floats in [0, 1] or channel-last uint8 (n, H, W, 3).
    A single image (3-D input) is promoted to a batch of one.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected a 4-D image batch, got shape {X.shape}")
    if X.dtype == np.uint8:
        if X.shape[-1] != 3:
            raise ValueError(f"uint8 images must be channel-last (n, H, W, 3), got {X.shape}")
        X = X.transpose(0, 3, 1, 2).astype(np.float32) / 255.0
    else:
        if X.shape[1] != 3:
            raise ValueError(f"float images must be channel-first (n, 3, H, W), got {X.shape}")
        if not np.issubdtype(X.dtype, np.floating):
            raise ValueError(f"unsupported image dtype {X.dtype}")
        X = X.astype(np.float32)
        if not np.isfinite(X).all():
            raise ValueError("images contain NaN or infinite values")
        if X.size and (X.min() < 0.0 or X.max() > 1.0):
            raise ValueError("float images must lie in [0, 1]")
    if len(X) == 0:
        raise ValueError("empty image batch")
    h, w = X.shape[2:]
    if h % multiple_of or w % multiple_of:
        raise ValueError(f"image size {h}x{w} must be divisible by {multiple_of}")
    return np.ascontiguousarray(X)


def check_label_maps(y, num_classes: int, n: int | None = None, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Return an int64 (n, H, W) stack of class indices in [0, num_classes)."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise ValueError(f"expected (n, H, W) label maps, got shape {y.shape}")
    if np.issubdtype(y.dtype, np.floating):
        if not np.array_equal(y, np.round(y)):
            raise ValueError("label maps must hold integer class indices")
    elif not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"unsupported label dtype {y.dtype}")
    if n is not None and len(y) != n:
        raise ValueError(f"got {len(y)} label maps for {n} images")
    if shape is not None and tuple(y.shape[1:]) != tuple(shape):
        raise ValueError(f"label maps are {y.shape[1:]}, images are {tuple(shape)}")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"label values must lie in [0, {num_classes}), got [{y.min()}, {y.max()}]")
    return y.astype(np.int64)
