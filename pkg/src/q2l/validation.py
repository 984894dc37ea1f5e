"""Input checks shared by the estimator API and the command line."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Validate an N×H×W×3 image batch; 8-bit input is kept as uint8.

    Float input must be finite and lie in [0, 1].
    """
    raw = np.asarray(X)
    if raw.dtype == np.uint8:
        arr = check_array(raw, allow_nd=True, dtype=None, ensure_min_samples=1)
    else:
        arr = check_array(raw, allow_nd=True, dtype=np.float64, ensure_all_finite=True, ensure_min_samples=1)
        if arr.min() < 0 or arr.max() > 1:
            raise ValueError("float images must lie in [0, 1]; pass uint8 for 0-255 data")
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected an N×H×W×3 image batch, got shape {arr.shape}")
    if arr.shape[1] != arr.shape[2]:
        raise ValueError(f"images must be square, got {arr.shape[1]}×{arr.shape[2]}")
    if image_size is not None and arr.shape[1] != image_size:
        raise ValueError(f"model expects {image_size}×{image_size} images, got {arr.shape[1]}×{arr.shape[2]}")
    return arr


def check_targets(Y, n_samples: int | None = None, n_classes: int | None = None) -> np.ndarray:
    """Validate an N×K multi-hot target matrix and return it as int64."""
    arr = check_array(Y, dtype=None, ensure_2d=True, ensure_min_samples=1)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("targets must be multi-hot (entries 0 or 1)")
    arr = arr.astype(np.int64)
    if n_samples is not None and arr.shape[0] != n_samples:
        raise ValueError(f"{n_samples} images but {arr.shape[0]} target rows")
    if n_classes is not None and arr.shape[1] != n_classes:
        raise ValueError(f"expected {n_classes} target columns, got {arr.shape[1]}")
    return arr


def check_probabilities(P, n_classes: int | None = None) -> np.ndarray:
    arr = check_array(P, dtype=np.float64, ensure_2d=True)
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("scores must lie in [0, 1]")
    if n_classes is not None and arr.shape[1] != n_classes:
        raise ValueError(f"expected {n_classes} score columns, got {arr.shape[1]}")
    return arr
