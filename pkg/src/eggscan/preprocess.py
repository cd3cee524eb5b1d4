"""Grayscale conversion, percentile contrast stretch and PNG I/O."""

import math
from pathlib import Path

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_image
from .exceptions import InvalidInputError

# ITU-R BT.601 luma weights
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def round_half_up(values):
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5)


def to_grayscale(image):
    """Collapse an RGB frame to one luma channel; 1-channel input is returned unchanged."""
    arr = check_image(image)
    if arr.ndim == 2:
        return arr
    rgb = arr.astype(np.float64)
    luma = rgb[..., 0] * LUMA_WEIGHTS[0] + rgb[..., 1] * LUMA_WEIGHTS[1] + rgb[..., 2] * LUMA_WEIGHTS[2]
    return np.clip(round_half_up(luma), 0, 255).astype(np.uint8)


def nearest_rank_quantile(values, q):
    """Nearest-rank quantile of a flat sample: the ceil(q*n)-th smallest value (q=0 gives the minimum)."""
    flat = np.sort(np.asarray(values).ravel())
    rank = max(1, math.ceil(q * flat.size))
    return flat[min(rank, flat.size) - 1]


def enhance_contrast(image, low_pct=0.01, high_pct=0.99):
    """Linearly stretch intensities between two nearest-rank quantiles onto [0, 255].

    Images whose two quantiles coincide are returned unchanged.
    """
    arr = check_image(image, channels=1)
    if not 0.0 <= low_pct < high_pct <= 1.0:
        raise InvalidInputError(f"need 0 <= low_pct < high_pct <= 1, got ({low_pct}, {high_pct})")
    counts = np.bincount(arr.ravel(), minlength=256)
    cdf = np.cumsum(counts)
    n = arr.size
    # nearest-rank lookups on the histogram, same result as sorting the pixels
    lo = int(np.searchsorted(cdf, max(1, math.ceil(low_pct * n))))
    hi = int(np.searchsorted(cdf, max(1, math.ceil(high_pct * n))))
    if lo == hi:
        return arr
    levels = np.arange(256, dtype=np.float64)
    lut = round_half_up(255.0 * np.clip((levels - lo) / (hi - lo), 0.0, 1.0)).astype(np.uint8)
    return lut[arr]


def preprocess(image, low_pct=0.01, high_pct=0.99):
    """Grayscale conversion followed by contrast enhancement."""
    return enhance_contrast(to_grayscale(image), low_pct, high_pct)


class Preprocessor(TransformerMixin, BaseEstimator):
    """Stateless transformer applying :func:`preprocess` to a sequence of frames."""

    def __init__(self, low_pct=0.01, high_pct=0.99):
        self.low_pct = low_pct
        self.high_pct = high_pct

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [preprocess(img, self.low_pct, self.high_pct) for img in X]


def read_png(path):
    with Image.open(path) as im:
        if im.mode in ("L", "RGB"):
            return np.array(im)
        if im.mode in ("I;16", "I") or im.mode.startswith("I;"):
            raise InvalidInputError(f"{path}: only 8-bit PNGs are supported")
        return np.array(im.convert("RGB"))


def write_png(path, image):
    arr = check_image(image)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # no timestamps or text chunks, so equal pixels give equal bytes
    Image.fromarray(arr).save(path, format="PNG", optimize=False)
