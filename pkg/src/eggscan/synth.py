"""Synthetic low-magnification microscope frames with annotated eggs and debris.

Each egg class is a caricature: AL oval with variable ellipticity, HD nearly
circular, FB large with a faint rim, Tn small with a thick dark rim. Every
image carries eggs of a single class, like the real slides.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import resize_batch
from .exceptions import ConfigurationError
from .manifest import ManifestEntry, write_manifest
from .patching import EGG_CLASSES, Annotation, BoundingBox
from .preprocess import write_png

REFERENCE_IMAGE_COUNTS = (67, 27, 32, 36)  # AL, HD, FB, Tn
DEFAULT_MIX = tuple(c / sum(REFERENCE_IMAGE_COUNTS) for c in REFERENCE_IMAGE_COUNTS)

RGB_TINT = (1.04, 1.0, 0.88)


@dataclass(frozen=True)
class ClassAppearance:
    major_axis: tuple
    axis_ratio: tuple
    rim_contrast: float
    rim_width: float
    texture_amplitude: float
    intensity_offset: float

    def __post_init__(self):
        if not 0 < self.major_axis[0] <= self.major_axis[1] <= 90:
            raise ConfigurationError("major_axis must lie within (0, 90] px")
        if not 0 < self.axis_ratio[0] <= self.axis_ratio[1] <= 1:
            raise ConfigurationError("axis_ratio must lie within (0, 1]")


DEFAULT_APPEARANCE = {
    "AL": ClassAppearance((52, 66), (0.62, 0.80), 60.0, 5.0, 8.0, -30.0),
    "HD": ClassAppearance((46, 58), (0.90, 1.00), 40.0, 2.5, 4.0, 20.0),
    "FB": ClassAppearance((74, 88), (0.55, 0.70), 25.0, 3.0, 3.0, -5.0),
    "Tn": ClassAppearance((34, 42), (0.88, 1.00), 75.0, 7.0, 10.0, 0.0),
}


@dataclass(frozen=True)
class SynthSpec:
    image_size: tuple = (640, 480)
    eggs_per_image: tuple = (1, 3)
    class_mix: tuple = DEFAULT_MIX
    debris_count: tuple = (2, 6)
    noise_sigma: float = 2.0
    vignetting: tuple = (5.0, 9.0)  # centre-to-corner falloff, intensity units
    border_margin: int = 100  # min gap between an egg's bbox and the image edge
    seed: int = 0
    appearance: dict = field(default_factory=lambda: dict(DEFAULT_APPEARANCE))

    def __post_init__(self):
        lo, hi = self.eggs_per_image
        if not 1 <= lo <= hi <= 3:
            raise ConfigurationError("eggs_per_image must be a sub-range of [1, 3]")
        if len(self.class_mix) != len(EGG_CLASSES) or min(self.class_mix) < 0 \
                or abs(sum(self.class_mix) - 1.0) > 1e-9:
            raise ConfigurationError("class_mix needs four non-negative weights summing to 1")
        if min(self.image_size) < 100:
            raise ConfigurationError("image_size must be at least 100x100")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if self.border_margin < 0 or 2 * (self.border_margin + 2) + 90 > min(self.image_size):
            raise ConfigurationError("border_margin leaves no room for an egg")


@dataclass(frozen=True)
class EggRecord:
    class_label: str
    cx: float
    cy: float
    semi_major: float
    semi_minor: float
    angle: float
    rim_contrast: float
    rim_width: float


def _ellipse_extent(a, b, theta):
    c, s = math.cos(theta), math.sin(theta)
    return math.sqrt((a * c) ** 2 + (b * s) ** 2), math.sqrt((a * s) ** 2 + (b * c) ** 2)


def _egg_bbox(e, width, height):
    hx, hy = _ellipse_extent(e.semi_major, e.semi_minor, e.angle)
    x0 = max(0, math.floor(e.cx - hx - 0.5))
    y0 = max(0, math.floor(e.cy - hy - 0.5))
    x1 = min(width, math.ceil(e.cx + hx + 0.5))
    y1 = min(height, math.ceil(e.cy + hy + 0.5))
    return BoundingBox(x0, y0, x1 - x0, y1 - y0)


def _coverage(xr, yr, a, b):
    """Anti-aliased inside-coverage of an axis-aligned ellipse at rotated coords."""
    f = (xr / a) ** 2 + (yr / b) ** 2 - 1.0
    grad = 2.0 * np.sqrt((xr / a ** 2) ** 2 + (yr / b ** 2) ** 2) + 1e-9
    return np.clip(0.5 - f / grad, 0.0, 1.0)


def _smooth_noise(rng, side, cell=4):
    coarse = rng.normal(size=(1, max(2, side // cell), max(2, side // cell)))
    field_ = resize_batch(coarse, side)[0]
    return field_ / (field_.std() + 1e-9)


def _shading(rng, width, height, vignetting):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cx = width * rng.uniform(0.35, 0.65)
    cy = height * rng.uniform(0.35, 0.65)
    r2 = ((xx - cx) ** 2 + (yy - cy) ** 2) / (0.25 * (width ** 2 + height ** 2))
    out = -rng.uniform(*vignetting) * r2
    for _ in range(3):
        period = rng.uniform(300, 900)
        phi = rng.uniform(0, 2 * math.pi)
        theta = rng.uniform(0, math.pi)
        out += rng.uniform(0.3, 1.0) * np.sin(2 * math.pi * (xx * math.cos(theta) + yy * math.sin(theta)) / period + phi)
    return out


def _draw_egg(canvas, e, look, rng):
    h, w = canvas.shape
    hx, hy = _ellipse_extent(e.semi_major, e.semi_minor, e.angle)
    x0, x1 = max(0, int(e.cx - hx - 3)), min(w, int(e.cx + hx + 4))
    y0, y1 = max(0, int(e.cy - hy - 3)), min(h, int(e.cy + hy + 4))
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    c, s = math.cos(e.angle), math.sin(e.angle)
    dx, dy = xx - e.cx, yy - e.cy
    xr, yr = c * dx + s * dy, -s * dx + c * dy
    outer = _coverage(xr, yr, e.semi_major, e.semi_minor)
    rw = min(look.rim_width, 0.45 * e.semi_minor)
    inner = _coverage(xr, yr, e.semi_major - rw, e.semi_minor - rw)
    rim = outer - inner
    side = max(y1 - y0, x1 - x0)
    texture = look.texture_amplitude * _smooth_noise(rng, side)[:y1 - y0, :x1 - x0]
    local = canvas[y0:y1, x0:x1]
    interior = local + look.intensity_offset + texture
    rim_val = local - look.rim_contrast
    canvas[y0:y1, x0:x1] = local * (1 - outer) + rim_val * rim + interior * inner


def _draw_debris(canvas, rng, cx, cy, radius, darkness):
    h, w = canvas.shape
    r_max = radius * 1.6 + 2
    x0, x1 = max(0, int(cx - r_max)), min(w, int(cx + r_max) + 1)
    y0, y1 = max(0, int(cy - r_max)), min(h, int(cy + r_max) + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    rho = np.hypot(xx - cx, yy - cy)
    phi = np.arctan2(yy - cy, xx - cx)
    edge = np.full_like(rho, radius)
    for k in (2, 3, 5):
        edge += radius * rng.uniform(0.05, 0.2) * np.cos(k * phi + rng.uniform(0, 2 * math.pi))
    cover = np.clip(edge - rho + 0.5, 0.0, 1.0)
    canvas[y0:y1, x0:x1] -= darkness * cover


def _overlaps(box, boxes, margin):
    for b in boxes:
        if (box.x - margin < b.x + b.w and b.x - margin < box.x + box.w
                and box.y - margin < b.y + b.h and b.y - margin < box.y + box.h):
            return True
    return False


def render_image(spec, draw_seed, egg_class=None):
    """Full render: ``(rgb_image, annotations, egg_records)``."""
    rng = np.random.default_rng(draw_seed)
    width, height = spec.image_size
    if egg_class is None:
        egg_class = EGG_CLASSES[int(rng.choice(len(EGG_CLASSES), p=np.asarray(spec.class_mix)))]
    look = spec.appearance[egg_class]
    canvas = rng.uniform(170, 190) + _shading(rng, width, height, spec.vignetting)

    k = int(rng.integers(spec.eggs_per_image[0], spec.eggs_per_image[1] + 1))
    eggs, boxes = [], []
    while k > 0:
        eggs, boxes = [], []
        for _ in range(k):
            for _attempt in range(100):
                a = rng.uniform(*look.major_axis) / 2
                b = a * rng.uniform(*look.axis_ratio)
                theta = rng.uniform(0, math.pi)
                hx, hy = _ellipse_extent(a, b, theta)
                pad = spec.border_margin + 2
                cx = rng.uniform(hx + pad, width - hx - pad)
                cy = rng.uniform(hy + pad, height - hy - pad)
                egg = EggRecord(egg_class, cx, cy, a, b, theta, look.rim_contrast, look.rim_width)
                box = _egg_bbox(egg, width, height)
                if not _overlaps(box, boxes, margin=10):
                    eggs.append(egg)
                    boxes.append(box)
                    break
            else:
                break
        if len(eggs) == k:
            break
        k -= 1
    if k == 0:
        raise ConfigurationError("could not place any egg in the image")

    for e in eggs:
        _draw_egg(canvas, e, look, rng)
    n_debris = int(rng.integers(spec.debris_count[0], spec.debris_count[1] + 1))
    placed = 0
    for _attempt in range(20 * max(n_debris, 1)):
        if placed == n_debris:
            break
        radius = rng.uniform(2, 5)
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        r = int(radius * 1.6 + 2)
        box = BoundingBox(max(0, int(cx) - r), max(0, int(cy) - r), 2 * r + 1, 2 * r + 1)
        if _overlaps(box, boxes, margin=4):
            continue
        _draw_debris(canvas, rng, cx, cy, radius, rng.uniform(30, 60))
        placed += 1

    rgb = canvas[:, :, None] * np.asarray(RGB_TINT)
    rgb = rgb + rng.normal(0.0, spec.noise_sigma, size=rgb.shape) if spec.noise_sigma > 0 else rgb
    image = np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)
    annotations = [Annotation(egg_class, box) for box in boxes]
    return image, annotations, eggs


def generate_image(spec, draw_seed, egg_class=None):
    """One RGB frame with 1-3 eggs of a single class; returns ``(image, annotations)``."""
    image, annotations, _ = render_image(spec, draw_seed, egg_class)
    return image, annotations


def apportion(n, weights):
    """Largest-remainder integer split of ``n`` proportional to ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    quotas = n * w / w.sum()
    counts = np.floor(quotas).astype(int)
    order = sorted(range(len(w)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:n - counts.sum()]:
        counts[i] += 1
    return [int(c) for c in counts]


def class_assignment(spec, n_images):
    counts = apportion(n_images, spec.class_mix)
    labels = [c for c, k in zip(EGG_CLASSES, counts) for _ in range(k)]
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    return [labels[i] for i in rng.permutation(n_images)]


def generate_dataset(spec, n_images, out_dir):
    """Write ``images/img_NNNN.png`` and ``manifest.jsonl`` under ``out_dir``.

    Class counts follow ``class_mix`` by largest-remainder apportionment.
    Returns ``(manifest_path, entries)``.
    """
    if n_images < 1:
        raise ConfigurationError("n_images must be >= 1")
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, cls in enumerate(class_assignment(spec, n_images)):
        image, annotations = generate_image(spec, [spec.seed, i], cls)
        path = image_dir / f"img_{i:04d}.png"
        write_png(path, image)
        entries.append(ManifestEntry(path, annotations))
    return write_manifest(out_dir / "manifest.jsonl", entries), entries


def egg_features(gray, egg):
    """(area, eccentricity, measured rim contrast) of a rendered egg."""
    area = math.pi * egg.semi_major * egg.semi_minor
    ecc = math.sqrt(max(0.0, 1.0 - (egg.semi_minor / egg.semi_major) ** 2))
    h, w = gray.shape
    hx, hy = _ellipse_extent(egg.semi_major, egg.semi_minor, egg.angle)
    x0, x1 = max(0, int(egg.cx - hx - 8)), min(w, int(egg.cx + hx + 9))
    y0, y1 = max(0, int(egg.cy - hy - 8)), min(h, int(egg.cy + hy + 9))
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    c, s = math.cos(egg.angle), math.sin(egg.angle)
    dx, dy = xx - egg.cx, yy - egg.cy
    xr, yr = c * dx + s * dy, -s * dx + c * dy
    r = np.sqrt((xr / egg.semi_major) ** 2 + (yr / egg.semi_minor) ** 2)
    rim_lo = 1.0 - 0.8 * min(egg.rim_width, 0.45 * egg.semi_minor) / egg.semi_minor
    local = gray[y0:y1, x0:x1].astype(np.float64)
    rim = local[(r > rim_lo) & (r < 0.97)]
    ring = local[(r > 1.15) & (r < 1.4)]
    contrast = float(np.median(ring) - np.mean(rim)) if rim.size and ring.size else 0.0
    return area, ecc, contrast
