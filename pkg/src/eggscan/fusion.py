"""Gaussian-weighted fusion of patch distributions into a whole-image probability map."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ._validation import check_image
from .exceptions import InvalidInputError
from .patching import CLASSES, EGG_CLASSES


def gaussian_kernel(side, sigma=1.0):
    """Patch-sized weights exp(-(u^2 + v^2) / (2 sigma^2)), zero-mean, with u, v in [-1, 1].

    Coordinates are normalised so the patch edge sits at distance 1 from
    the centre; ``sigma`` is in those units.
    """
    if int(side) != side or side < 1:
        raise InvalidInputError(f"kernel side must be a positive integer, got {side}")
    if not sigma > 0:
        raise InvalidInputError(f"sigma must be > 0, got {sigma}")
    half = (side - 1) / 2.0
    t = (np.arange(side) - half) / half if side > 1 else np.zeros(1)
    g = np.exp(-(t ** 2) / (2.0 * sigma ** 2))
    return np.outer(g, g)


def fuse(positions, probs, kernel, image_size):
    """Per-pixel weighted average of the distributions of every patch covering it.

    Returns an array of shape (height, width, 5). Patches are accumulated in
    the given order, so results are bit-stable.
    """
    width, height = image_size
    probs = np.asarray(probs, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    if len(positions) != len(probs):
        raise InvalidInputError(f"{len(positions)} positions but {len(probs)} distributions")
    if probs.ndim != 2 or (len(probs) and probs.shape[1] != len(CLASSES)):
        raise InvalidInputError(f"distributions must have shape (n, {len(CLASSES)})")
    num = np.zeros((height, width, probs.shape[1] if probs.ndim == 2 else len(CLASSES)))
    den = np.zeros((height, width))
    wk = kernel[:, :, None]
    for (x, y), p in zip(positions, probs):
        if x < 0 or y < 0 or x + kw > width or y + kh > height:
            raise InvalidInputError(f"patch at ({x}, {y}) falls outside the {width}x{height} image")
        num[y:y + kh, x:x + kw] += wk * p
        den[y:y + kh, x:x + kw] += kernel
    if np.any(den <= 0):
        raise InvalidInputError("patch grid does not cover every pixel")
    return num / den[:, :, None]


@dataclass(frozen=True)
class Detection:
    class_label: str | None  # None means no egg detected
    location: tuple | None
    confidence: float

    def to_dict(self):
        x, y = self.location if self.location is not None else (None, None)
        return {"class": self.class_label if self.class_label is not None else "NONE",
                "x": x, "y": y, "confidence": self.confidence}


def predict_image(prob_map, threshold=0.5):
    """Strongest egg-channel peak of the map, or no detection below ``threshold``.

    Background is left out of the argmax; ties go to the earlier class in
    AL, HD, FB, Tn order and to the first pixel in row-major order.
    """
    m = np.asarray(prob_map)
    egg = m[:, :, :len(EGG_CLASSES)]
    peaks = egg.reshape(-1, len(EGG_CLASSES)).max(axis=0)
    winner = int(np.argmax(peaks))
    conf = float(peaks[winner])
    if conf < threshold:
        return Detection(None, None, conf)
    y, x = np.unravel_index(int(np.argmax(egg[:, :, winner])), egg.shape[:2])
    return Detection(EGG_CLASSES[winner], (int(x), int(y)), conf)


def render_overlay(image, prob_map, detection, alpha=0.6):
    """RGB view of the image with the winning channel as a red heat overlay."""
    gray = check_image(image, channels=1)
    m = np.asarray(prob_map)
    if m.shape[:2] != gray.shape:
        raise InvalidInputError(f"map size {m.shape[1]}x{m.shape[0]} differs from image "
                                f"{gray.shape[1]}x{gray.shape[0]}")
    rgb = np.repeat(gray[:, :, None].astype(np.float64), 3, axis=2)
    if detection.class_label is None:
        return rgb.astype(np.uint8)
    heat = alpha * m[:, :, CLASSES.index(detection.class_label)]
    rgb = rgb * (1.0 - heat[:, :, None])
    rgb[:, :, 0] += 255.0 * heat
    out = Image.fromarray(np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(out)
    x, y = detection.location
    r = 6
    draw.line([(x - r, y), (x + r, y)], fill=(255, 255, 0), width=1)
    draw.line([(x, y - r), (x, y + r)], fill=(255, 255, 0), width=1)
    draw.text((4, 4), f"{detection.class_label} {detection.confidence:.2f}", fill=(255, 255, 0))
    return np.array(out)


def save_probability_map(prob_map, path):
    """Flat little-endian float32 dump (row-major, channel-last) plus a JSON sidecar."""
    m = np.asarray(prob_map)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bin_path = path.with_suffix(".f32")
    bin_path.write_bytes(np.ascontiguousarray(m, dtype="<f4").tobytes())
    meta = {"width": int(m.shape[1]), "height": int(m.shape[0]), "channels": list(CLASSES),
            "dtype": "<f4", "layout": "row-major, channel-last", "data_file": bin_path.name}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path.with_suffix(".json")


def load_probability_map(path):
    meta = json.loads(Path(path).with_suffix(".json").read_text())
    raw = np.fromfile(Path(path).parent / meta["data_file"], dtype="<f4")
    return raw.reshape(meta["height"], meta["width"], len(meta["channels"]))
