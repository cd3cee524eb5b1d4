"""Input validation helpers shared by the pipeline stages."""

import numpy as np

from .exceptions import InvalidInputError


def check_image(image, channels=None, name="image"):
    """Return ``image`` as a uint8 array of shape (H, W) or (H, W, 3).

    ``channels`` restricts the accepted channel count (1 or 3).
    """
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        n_channels = 1
    elif arr.ndim == 3 and arr.shape[2] == 3:
        n_channels = 3
    else:
        raise InvalidInputError(f"{name} must have 1 or 3 channels, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"{name} must be at least 1x1, got shape {arr.shape}")
    if channels is not None and n_channels != channels:
        raise InvalidInputError(f"{name} must have {channels} channel(s), got {n_channels}")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.number):
            raise InvalidInputError(f"{name} must be numeric, got dtype {arr.dtype}")
        if arr.size and (arr.min() < 0 or arr.max() > 255 or not np.all(np.isfinite(arr))):
            raise InvalidInputError(f"{name} intensities must lie in [0, 255]")
        if np.issubdtype(arr.dtype, np.floating) and np.any(arr != np.round(arr)):
            raise InvalidInputError(f"{name} intensities must be integral")
        arr = arr.astype(np.uint8)
    return arr


def check_patch_stack(patches, name="patches"):
    """Return patches as a uint8 array of shape (n, side, side)."""
    arr = np.asarray(patches)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or (arr.shape[0] and arr.shape[1] != arr.shape[2]):
        raise InvalidInputError(f"{name} must be a stack of square 1-channel patches, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.stack([check_image(p, channels=1, name=name) for p in arr]) if len(arr) else arr.astype(np.uint8)
    return arr


def check_fraction(value, name, low=0.0, high=1.0, closed=False):
    value = float(value)
    ok = low <= value <= high if closed else low < value < high
    if not ok:
        raise InvalidInputError(f"{name} must lie in {'[' if closed else '('}{low}, {high}{']' if closed else ')'}, got {value}")
    return value
