"""Overlapping patch grid, patch extraction and training labels."""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._validation import check_image
from .exceptions import InvalidInputError

EGG_CLASSES = ("AL", "HD", "FB", "Tn")
BACKGROUND = "BG"
CLASSES = EGG_CLASSES + (BACKGROUND,)
EXCLUDED = "EXCLUDED"
CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}


@dataclass(frozen=True)
class GridConfig:
    patch_size: int = 100
    stride: int = 20  # one fifth of the patch, i.e. 4/5 overlap

    def __post_init__(self):
        if int(self.patch_size) != self.patch_size or self.patch_size < 1:
            raise InvalidInputError(f"patch_size must be a positive integer, got {self.patch_size}")
        if int(self.stride) != self.stride or not 1 <= self.stride <= self.patch_size:
            raise InvalidInputError(f"stride must satisfy 1 <= stride <= patch_size, got {self.stride}")


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise InvalidInputError(f"bounding box needs w, h >= 1, got {self.w}x{self.h}")
        if self.x < 0 or self.y < 0:
            raise InvalidInputError(f"bounding box origin must be non-negative, got ({self.x}, {self.y})")

    @property
    def center(self):
        """Integer pixel nearest the box centre."""
        return self.x + self.w // 2, self.y + self.h // 2

    def fits_in(self, width, height):
        return self.x + self.w <= width and self.y + self.h <= height

    def as_list(self):
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class Annotation:
    class_label: str
    bbox: BoundingBox

    def __post_init__(self):
        if self.class_label not in EGG_CLASSES:
            raise InvalidInputError(f"annotation class must be one of {EGG_CLASSES}, got {self.class_label!r}")


@dataclass
class LabeledPatch:
    patch: np.ndarray
    label: str
    position: tuple = (0, 0)


@dataclass
class PatchGrid:
    positions: list
    config: GridConfig = field(default_factory=GridConfig)
    image_size: tuple = (0, 0)

    def __len__(self):
        return len(self.positions)

    def as_array(self):
        return np.asarray(self.positions, dtype=np.int64).reshape(-1, 2)


def _axis_offsets(extent, patch, stride):
    last = extent - patch
    offsets = list(range(0, last + 1, stride))
    if offsets[-1] != last:
        offsets.append(last)
    return offsets


def patch_positions(width, height, config=GridConfig()):
    """Top-left corners of the sliding-window grid, row-major.

    A final clamped window is appended on an axis whose extent is not on the
    stride lattice, so every pixel is covered.
    """
    p = config.patch_size
    if p > width or p > height:
        raise InvalidInputError(f"patch size {p} exceeds image size {width}x{height}")
    xs = _axis_offsets(width, p, config.stride)
    ys = _axis_offsets(height, p, config.stride)
    return PatchGrid([(x, y) for y in ys for x in xs], config, (width, height))


def _check_grid_matches(image, grid):
    h, w = image.shape[:2]
    if tuple(grid.image_size) != (w, h):
        raise InvalidInputError(f"grid built for {grid.image_size[0]}x{grid.image_size[1]}, image is {w}x{h}")


def patch_stack(image, grid):
    """All grid crops as one array of shape (n, P, P[, 3])."""
    arr = check_image(image)
    _check_grid_matches(arr, grid)
    p = grid.config.patch_size
    windows = sliding_window_view(arr, (p, p), axis=(0, 1))
    pos = grid.as_array()
    crops = windows[pos[:, 1], pos[:, 0]]
    if arr.ndim == 3:
        crops = np.moveaxis(crops, 1, -1)
    return np.ascontiguousarray(crops)


def extract_patches(image, grid):
    """List of ``(position, crop)`` pairs; crop pixel (u, v) is image pixel (x+u, y+v)."""
    crops = patch_stack(image, grid)
    return list(zip(grid.positions, crops))


def label_patches(grid, annotations):
    """Assign each grid position an egg class, ``BG`` or ``EXCLUDED``.

    An egg class requires full containment of its box. Patches touching a box
    without containing one, or containing boxes of two classes, are excluded.
    """
    p = grid.config.patch_size
    boxes = []
    for ann in annotations:
        b = ann.bbox
        if b.w > p or b.h > p:
            raise InvalidInputError(f"bounding box {b.w}x{b.h} larger than patch size {p}")
        boxes.append((b.x, b.y, b.x + b.w, b.y + b.h, ann.class_label))
    labels = []
    for x, y in grid.positions:
        contained = set()
        touched = False
        for x0, y0, x1, y1, cls in boxes:
            if x0 >= x and y0 >= y and x1 <= x + p and y1 <= y + p:
                contained.add(cls)
            elif x0 < x + p and x1 > x and y0 < y + p and y1 > y:
                touched = True
        if len(contained) == 1:
            labels.append(((x, y), contained.pop()))
        elif contained or touched:
            labels.append(((x, y), EXCLUDED))
        else:
            labels.append(((x, y), BACKGROUND))
    return labels
