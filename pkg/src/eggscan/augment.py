"""Egg-patch augmentation (shift, rotate, flip) and balanced training-set assembly."""

import math
from collections.abc import Sequence
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._validation import check_image
from .exceptions import ConfigurationError, InvalidInputError
from .patching import BACKGROUND, EGG_CLASSES, LabeledPatch


@dataclass(frozen=True)
class AugmentSpec:
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5
    rotation_range: tuple = (0.0, 160.0)
    shift_grid: int = 50
    target_per_class: int = 10000
    seed: int = 0
    patch_size: int = 100
    # "uniform": integer offsets in [-shift_grid, shift_grid]; "lattice": multiples of shift_grid
    shift_mode: str = "uniform"

    def __post_init__(self):
        lo, hi = self.rotation_range
        if not 0 <= lo <= hi < 360:
            raise ConfigurationError(f"rotation_range must lie within [0, 360), got {self.rotation_range}")
        if self.target_per_class < 1:
            raise ConfigurationError("target_per_class must be >= 1")
        if self.shift_grid < 1:
            raise ConfigurationError("shift_grid must be >= 1")
        if self.shift_mode not in ("uniform", "lattice"):
            raise ConfigurationError(f"shift_mode must be 'uniform' or 'lattice', got {self.shift_mode!r}")
        for name in ("flip_h_prob", "flip_v_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigurationError(f"{name} must lie in [0, 1]")


class Draw(NamedTuple):
    flip_h: bool
    flip_v: bool
    angle: float
    dx: int
    dy: int


IDENTITY = Draw(False, False, 0.0, 0, 0)


def _window_start(center, shift, patch, extent):
    return min(max(center + shift - patch // 2, 0), extent - patch)


def valid_shifts(center, patch, extent, grid, mode="lattice"):
    """Offsets along one axis that keep ``center`` inside the clamped window.

    ``mode="lattice"`` yields multiples of ``grid`` up to half a patch;
    ``mode="uniform"`` yields every integer in ``[-grid, grid]``.
    """
    return list(_valid_shifts(int(center), int(patch), int(extent), int(grid), mode))


@lru_cache(maxsize=4096)
def _valid_shifts(center, patch, extent, grid, mode):
    if mode == "lattice":
        k = (patch // 2) // grid
        candidates = range(-k * grid, k * grid + 1, grid)
    else:
        candidates = range(-grid, grid + 1)
    out = []
    for d in candidates:
        start = _window_start(center, d, patch, extent)
        if start <= center < start + patch:
            out.append(d)
    return tuple(out)


def rotate_patch(patch, angle, fill):
    """Rotate a square patch about its centre with bilinear sampling.

    Output pixels whose source falls outside the patch take ``fill``.
    """
    side = patch.shape[0]
    if angle % 360 == 0:
        return patch.copy()
    c = (side - 1) / 2.0
    theta = math.radians(angle)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    xr, yr = _centred_grid(side)
    # inverse mapping: output -> source
    sx = cos_t * xr + sin_t * yr + c
    sy = cos_t * yr - sin_t * xr + c
    inside = (sx >= 0) & (sx <= side - 1) & (sy >= 0) & (sy <= side - 1)
    np.clip(sx, 0, side - 1, out=sx)
    np.clip(sy, 0, side - 1, out=sy)
    x0 = sx.astype(np.intp)
    y0 = sy.astype(np.intp)
    fx, fy = sx - x0, sy - y0
    # one edge-replicated row and column make the +1 neighbours match border clamping
    stride = side + 1
    src = np.empty((stride, stride))
    src[:side, :side] = patch
    src[:side, side] = patch[:, -1]
    src[side, :] = src[side - 1, :]
    src = src.ravel()
    i00 = y0 * stride + x0
    v00, v10 = src[i00], src[i00 + stride]
    top = v00 + fx * (src[i00 + 1] - v00)
    bottom = v10 + fx * (src[i00 + stride + 1] - v10)
    out = top + fy * (bottom - top)
    out[~inside] = fill
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


@lru_cache(maxsize=8)
def _centred_grid(side):
    c = (side - 1) / 2.0
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    xr, yr = xx - c, yy - c
    xr.flags.writeable = False
    yr.flags.writeable = False
    return xr, yr


def _median_u8(values):
    """``np.median`` of a uint8 array via its 256-bin histogram."""
    cum = np.cumsum(np.bincount(values.ravel(), minlength=256))
    n = values.size
    lo = int(np.searchsorted(cum, (n - 1) // 2, side="right"))
    hi = int(np.searchsorted(cum, n // 2, side="right"))
    return (lo + hi) / 2


def _rotate_point(u, v, angle, side):
    c = (side - 1) / 2.0
    theta = math.radians(angle)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    return cos_t * (u - c) - sin_t * (v - c) + c, sin_t * (u - c) + cos_t * (v - c) + c


def transformed_center(image_shape, annotation, spec, draw):
    """Egg centre in output-patch coordinates after shift, rotation and flips."""
    h, w = image_shape[:2]
    p = spec.patch_size
    cx, cy = annotation.bbox.center
    x0 = _window_start(cx, draw.dx, p, w)
    y0 = _window_start(cy, draw.dy, p, h)
    u, v = _rotate_point(cx - x0, cy - y0, draw.angle, p)
    if draw.flip_h:
        u = p - 1 - u
    if draw.flip_v:
        v = p - 1 - v
    return u, v


def transform_sample(image, annotation, spec, draw):
    """Egg-centred crop shifted by (dx, dy), rotated, then flipped.

    Returns None when the egg centre would leave the clamped window; the caller
    should retry with another draw.
    """
    img = check_image(image, channels=1)
    h, w = img.shape
    p = spec.patch_size
    if p > w or p > h:
        raise InvalidInputError(f"patch size {p} exceeds image size {w}x{h}")
    b = annotation.bbox
    if not b.fits_in(w, h):
        raise InvalidInputError(f"annotation {b} lies outside a {w}x{h} image")
    cx, cy = b.center
    x0 = _window_start(cx, draw.dx, p, w)
    y0 = _window_start(cy, draw.dy, p, h)
    if not (x0 <= cx < x0 + p and y0 <= cy < y0 + p):
        return None
    u, v = _rotate_point(cx - x0, cy - y0, draw.angle, p)
    if not (0 <= u <= p - 1 and 0 <= v <= p - 1):
        # rotation carried the egg centre off the patch
        return None
    crop = img[y0:y0 + p, x0:x0 + p]
    out = rotate_patch(crop, draw.angle, _median_u8(crop))
    if draw.flip_h:
        out = out[:, ::-1]
    if draw.flip_v:
        out = out[::-1, :]
    return np.ascontiguousarray(out)


def sample_draw(rng, spec, image_shape, annotation):
    """Random draw; each shift axis is uniform over the offsets valid for this egg."""
    h, w = image_shape[:2]
    cx, cy = annotation.bbox.center
    p = spec.patch_size
    flip_h = bool(rng.random() < spec.flip_h_prob)
    flip_v = bool(rng.random() < spec.flip_v_prob)
    angle = float(rng.uniform(*spec.rotation_range))
    xs = valid_shifts(cx, p, w, spec.shift_grid, spec.shift_mode)
    ys = valid_shifts(cy, p, h, spec.shift_grid, spec.shift_mode)
    dx = int(xs[rng.integers(len(xs))])
    dy = int(ys[rng.integers(len(ys))])
    return Draw(flip_h, flip_v, angle, dx, dy)


class BackgroundPool(Sequence):
    """Lazily cropped background patches: ``(image_index, (x, y))`` references into ``images``."""

    def __init__(self, images, refs, patch_size=100):
        self.images = images
        self.refs = list(refs)
        self.patch_size = patch_size

    def __len__(self):
        return len(self.refs)

    def __getitem__(self, i):
        idx, (x, y) = self.refs[i]
        p = self.patch_size
        crop = np.ascontiguousarray(self.images[idx][y:y + p, x:x + p])
        return LabeledPatch(crop, BACKGROUND, (x, y))

    @classmethod
    def from_labels(cls, images, labels_per_image, patch_size=100):
        refs = [(i, pos) for i, labels in enumerate(labels_per_image)
                for pos, label in labels if label == BACKGROUND]
        return cls(images, refs, patch_size)


def build_balanced_set(dataset, bg_pool, spec=AugmentSpec()):
    """Exactly ``target_per_class`` patches for each egg class and for background.

    Each egg class gets one egg-centred crop per annotation, topped up with
    augmented samples cycling over the annotations. Background patches are
    drawn uniformly from ``bg_pool``, without replacement when it is large enough.
    """
    target = spec.target_per_class
    images = [check_image(img, channels=1) for img, _ in dataset]
    sources = {c: [] for c in EGG_CLASSES}
    for i, (_, annotations) in enumerate(dataset):
        for ann in annotations:
            sources[ann.class_label].append((i, ann))
    for c in EGG_CLASSES:
        if not sources[c]:
            raise ConfigurationError(f"class {c} has no annotations in the dataset")
    if len(bg_pool) == 0:
        raise ConfigurationError("background pool is empty")

    out = []
    for ci, c in enumerate(EGG_CLASSES):
        srcs = sources[c]
        for idx, ann in srcs[:target]:
            out.append(LabeledPatch(transform_sample(images[idx], ann, spec, IDENTITY), c, ann.bbox.center))
        for j in range(target - min(len(srcs), target)):
            idx, ann = srcs[j % len(srcs)]
            # one independent stream per sample index keeps generation splittable
            rng = np.random.default_rng([spec.seed, ci, j])
            patch = None
            while patch is None:
                patch = transform_sample(images[idx], ann, spec, sample_draw(rng, spec, images[idx].shape, ann))
            out.append(LabeledPatch(patch, c, ann.bbox.center))

    rng = np.random.default_rng([spec.seed, len(EGG_CLASSES)])
    n = len(bg_pool)
    picks = rng.choice(n, size=target, replace=n < target)
    for k in picks:
        item = bg_pool[int(k)]
        if not isinstance(item, LabeledPatch):
            item = LabeledPatch(np.asarray(item), BACKGROUND)
        out.append(item)
    return out


def dump_patches(patches, directory):
    """Write ``<class>_<index>.png`` files for inspection; index counts within each class."""
    from .preprocess import write_png

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    counters = {}
    for lp in patches:
        k = counters.get(lp.label, 0)
        counters[lp.label] = k + 1
        write_png(directory / f"{lp.label}_{k}.png", lp.patch)
