"""Input validation helpers shared by the estimator, trainer and CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import column_or_1d

from .encoder import EncoderConfig, check_input_size


def check_images(X, dtype=np.float32) -> np.ndarray:
    """Coerce to a finite ``[n, H, W, ch]`` array.

    A 3-D input is read as ``[n, H, W]`` single-channel images.
    """
    X = np.asarray(X)
    if X.dtype == object:
        raise ValueError("images must be a numeric array, not ragged/object data")
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped [n, H, W] or [n, H, W, ch], got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    X = X.astype(dtype, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or inf")
    return X


def check_bag_labels(y, n: int | None = None) -> np.ndarray:
    """Image-level labels as an int array of 0/1."""
    y = np.asarray(y)
    if y.ndim != 1:
        y = column_or_1d(y, warn=False)
    if n is not None and len(y) != n:
        raise ValueError(f"got {len(y)} labels for {n} images")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"bag labels must be 0 or 1, got {np.unique(y).tolist()}")
    return y.astype(int)


def check_image_size(size: int, cfg: EncoderConfig) -> None:
    """Raise :class:`~swin_mil.exceptions.ShapeError` if a square image of
    side ``size`` cannot pass through the encoder."""
    check_input_size(size, size, cfg)
