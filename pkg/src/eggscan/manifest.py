"""Line-oriented JSON dataset manifests: one ``{"image_path", "annotations"}`` object per line."""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import ConfigurationError, InvalidInputError
from .patching import EGG_CLASSES, Annotation, BoundingBox
from .preprocess import read_png


@dataclass
class ManifestEntry:
    image_path: Path
    annotations: list = field(default_factory=list)


def _parse_annotation(obj, where):
    if not isinstance(obj, dict) or set(obj) != {"class", "bbox"}:
        raise ConfigurationError(f"{where}: annotation needs exactly the keys 'class' and 'bbox'")
    cls, bbox = obj["class"], obj["bbox"]
    if cls not in EGG_CLASSES:
        raise ConfigurationError(f"{where}: class must be one of {list(EGG_CLASSES)}, got {cls!r}")
    if (not isinstance(bbox, list) or len(bbox) != 4
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in bbox)):
        raise ConfigurationError(f"{where}: bbox must be four integers [x, y, w, h]")
    try:
        return Annotation(cls, BoundingBox(*bbox))
    except InvalidInputError as exc:
        raise ConfigurationError(f"{where}: {exc}") from None


def read_manifest(path):
    """Entries with image paths resolved against the manifest's directory."""
    path = Path(path)
    base = path.parent
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{where}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or set(obj) - {"image_path", "annotations"} or "image_path" not in obj:
                raise ConfigurationError(f"{where}: entry needs 'image_path' and optional 'annotations' only")
            anns = obj.get("annotations", [])
            if not isinstance(anns, list):
                raise ConfigurationError(f"{where}: annotations must be a list")
            entries.append(ManifestEntry(base / obj["image_path"],
                                         [_parse_annotation(a, where) for a in anns]))
    return entries


def write_manifest(path, entries):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    lines = []
    for e in entries:
        rel = Path(os.path.relpath(Path(e.image_path).resolve(), base)).as_posix()
        anns = [{"class": a.class_label, "bbox": a.bbox.as_list()} for a in e.annotations]
        lines.append(json.dumps({"image_path": rel, "annotations": anns}, sort_keys=True))
    path.write_text("".join(line + "\n" for line in lines))
    return path


def load_image(entry):
    """Read an entry's image and check its boxes fit inside it."""
    image = read_png(entry.image_path)
    h, w = image.shape[:2]
    for a in entry.annotations:
        if not a.bbox.fits_in(w, h):
            raise ConfigurationError(f"{entry.image_path}: bbox {a.bbox.as_list()} exceeds {w}x{h} image")
    return image
