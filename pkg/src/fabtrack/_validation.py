"""Input validation helpers shared by the public functions and estimators."""

import numpy as np


def check_points(x, dim, name="points", allow_single=False):
    """Return ``x`` as a float64 array of shape (M, dim).

    With ``allow_single`` a bare (dim,) vector is accepted and the second
    return value tells the caller to squeeze the result back.
    """
    arr = np.asarray(x, dtype=np.float64)
    single = False
    if arr.ndim == 1 and allow_single and arr.shape[0] == dim:
        arr = arr[None, :]
        single = True
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"{name} must have shape (M, {dim}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if allow_single:
        return arr, single
    return arr


def check_image(img, name="image", channels=None):
    """Validate an image array (H, W) or (H, W, C) of finite reals."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ValueError(f"{name} must be 2-D or 3-D, got ndim={arr.ndim}")
    if channels is not None:
        if arr.ndim != 3 or arr.shape[2] != channels:
            raise ValueError(f"{name} must have {channels} channels, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_vertex_array(V, n_vertices, name="vertices"):
    arr = check_points(V, 3, name=name)
    if arr.shape[0] != n_vertices:
        raise ValueError(
            f"{name} has {arr.shape[0]} vertices, template has {n_vertices}")
    return arr


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return float(value)


def check_non_negative(value, name):
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be non-negative, got {value}")
    return float(value)
