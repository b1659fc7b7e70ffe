"""Input validation helpers shared by the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


def check_images(X, image_size: int = 16, name: str = "X") -> np.ndarray:
    """Coerce to a float32 (n, size*size) matrix of flattened images.

    Accepts (n, size, size), (n, size*size), or a single (size, size) /
    (size*size,) image.  Values must be finite.
    """
    arr = np.asarray(X, dtype=np.float32)
    n_pix = image_size * image_size
    if arr.ndim == 1 and arr.shape == (n_pix,):
        arr = arr.reshape(1, n_pix)
    elif arr.ndim == 2 and arr.shape == (image_size, image_size):
        arr = arr.reshape(1, n_pix)
    elif arr.ndim == 2 and arr.shape[1] == n_pix:
        pass
    elif arr.ndim == 3 and arr.shape[1:] == (image_size, image_size):
        arr = arr.reshape(arr.shape[0], n_pix)
    else:
        raise DimensionError(
            f"{name}: expected images of size {image_size}x{image_size} "
            f"(got array of shape {np.asarray(X).shape})"
        )
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_labels(y, n_samples: int, name: str = "y") -> np.ndarray:
    """Coerce to an int64 label vector aligned with ``n_samples`` rows."""
    arr = np.asarray(y)
    if arr.ndim != 1 or arr.shape[0] != n_samples:
        raise DimensionError(
            f"{name}: expected {n_samples} labels, got shape {arr.shape}"
        )
    return arr.astype(np.int64)
