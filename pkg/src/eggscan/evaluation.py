"""Dataset splitting, confusion matrices and patch / whole-image metrics."""

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .exceptions import ConfigurationError, InvalidInputError
from .patching import BACKGROUND, CLASS_INDEX, CLASSES, EGG_CLASSES, EXCLUDED

UNDEFINED = "−"  # rendered for metrics with a zero denominator


def round_half_up(value, ndigits=0):
    """Decimal half-up rounding of the value's shortest repr (96.55 -> 96.6)."""
    q = Decimal(1).scaleb(-ndigits)
    return float(Decimal(repr(float(value))).quantize(q, rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ConfigurationError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")


def split_counts(n, test_fraction):
    k = int(round_half_up(test_fraction * n))
    if k == 0 or k == n:
        raise ConfigurationError(f"test fraction {test_fraction} of {n} items leaves one side empty")
    return k


def split_dataset(items_per_class, spec=SplitSpec()):
    """Stratified train/test split; each class sends round-half-up(fraction * n) items to test.

    ``items_per_class`` maps a class to its items; both returned dicts keep
    the input's item order.
    """
    train, test = {}, {}
    for ci, (cls, items) in enumerate(items_per_class.items()):
        items = list(items)
        if not items:
            raise ConfigurationError(f"class {cls} has no items to split")
        k = split_counts(len(items), spec.test_fraction)
        rng = np.random.default_rng([spec.seed, ci])
        chosen = set(rng.permutation(len(items))[:k].tolist())
        test[cls] = [it for i, it in enumerate(items) if i in chosen]
        train[cls] = [it for i, it in enumerate(items) if i not in chosen]
    return train, test


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class, CLASSES order

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)

    def to_dict(self):
        return {"classes": list(CLASSES), "counts": self.counts.tolist()}


def confusion_matrix(pairs):
    counts = np.zeros((len(CLASSES), len(CLASSES)), dtype=np.int64)
    for true, pred in pairs:
        try:
            counts[CLASS_INDEX[true], CLASS_INDEX[pred]] += 1
        except KeyError as exc:
            raise InvalidInputError(f"unknown label {exc.args[0]!r}") from None
    return ConfusionMatrix(counts)


def _pct(num, den):
    return None if den == 0 else 100.0 * num / den


def mean_precision(precisions):
    """Mean of the defined per-class precisions (None entries skipped)."""
    vals = [p for p in precisions if p is not None]
    return None if not vals else float(np.mean(vals))


@dataclass
class MetricsReport:
    accuracy: float | None
    tpr: dict
    tnr: float | None
    precision: dict
    avg_precision: float | None

    def to_dict(self):
        return {"accuracy": self.accuracy, "tpr": self.tpr, "tnr": self.tnr,
                "precision": self.precision, "avg_precision": self.avg_precision}


def compute_metrics(matrix):
    c = np.asarray(matrix.counts)
    rows, cols = c.sum(axis=1), c.sum(axis=0)
    bg = CLASS_INDEX[BACKGROUND]
    tpr = {k: _pct(c[i, i], rows[i]) for i, k in enumerate(EGG_CLASSES)}
    precision = {k: _pct(c[i, i], cols[i]) for i, k in enumerate(EGG_CLASSES)}
    return MetricsReport(
        accuracy=_pct(np.trace(c), c.sum()),
        tpr=tpr,
        tnr=_pct(c[bg, bg], rows[bg]),
        precision=precision,
        avg_precision=mean_precision(precision.values()),
    )


def fmt(value, ndigits=2):
    return UNDEFINED if value is None else f"{round_half_up(value, ndigits):.{ndigits}f}"


def format_table(reports, ndigits=2):
    """Plain-text table with one row per (model, analysis type): accuracy, TPRs, TNR."""
    header = ["Model", "Analysis", "Accuracy(%)"] + [f"TPR {k}" for k in EGG_CLASSES] + ["TNR(%)"]
    rows = [[name, mode, fmt(r.accuracy, ndigits)] + [fmt(r.tpr[k], ndigits) for k in EGG_CLASSES]
            + [fmt(r.tnr, ndigits)] for (name, mode), r in reports.items()]
    return _align([header] + rows)


def format_precision_table(reports, ndigits=1):
    header = ["Model"] + [f"Precision {k}" for k in EGG_CLASSES] + ["Avg."]
    rows = [[name] + [fmt(r.precision[k], ndigits) for k in EGG_CLASSES] + [fmt(r.avg_precision, ndigits)]
            for name, r in reports.items()]
    return _align([header] + rows)


def format_confusion(matrix):
    header = ["true\\pred"] + list(CLASSES)
    rows = [[t] + [str(v) for v in matrix.counts[i]] for i, t in enumerate(CLASSES)]
    return _align([header] + rows)


def _align(table):
    widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
    return "\n".join("  ".join(cell.rjust(w) if j else cell.ljust(w) for j, (cell, w) in enumerate(zip(r, widths)))
                     for r in table) + "\n"


def image_label(annotations):
    """Whole-image ground truth: the single egg class present, or BG for an egg-free image."""
    if annotations is None:
        raise InvalidInputError("image has no annotation record")
    classes = {a.class_label for a in annotations}
    if len(classes) > 1:
        raise InvalidInputError(f"image mixes egg classes {sorted(classes)}; whole-image mode needs one")
    return classes.pop() if classes else BACKGROUND


def evaluate_pipeline(dataset, detector, mode="whole_image"):
    """Evaluate ``detector`` on ``(image, annotations)`` pairs.

    ``patch`` mode tallies each labelled grid patch (excluded patches are
    dropped); ``whole_image`` mode tallies one fused prediction per image, with
    no detection counted as a BG prediction. ``detector`` is a fitted
    :class:`eggscan.detector.PatchDetector` (or anything with the same
    ``patch_predictions`` / ``predict_one`` methods).
    """
    mode = mode.replace("-", "_")
    if mode not in ("patch", "whole_image"):
        raise InvalidInputError(f"mode must be 'patch' or 'whole_image', got {mode!r}")
    pairs = []
    for image, annotations in dataset:
        if annotations is None:
            raise InvalidInputError("image has no annotation record")
        if mode == "patch":
            labels, preds = detector.patch_predictions(image, annotations)
            pairs.extend((t, p) for t, p in zip(labels, preds) if t != EXCLUDED)
        else:
            truth = image_label(annotations)
            det = detector.predict_one(image)
            pairs.append((truth, det.class_label or BACKGROUND))
    matrix = confusion_matrix(pairs)
    return compute_metrics(matrix), matrix


def report_json(report, matrix, **extra):
    doc = {"metrics": report.to_dict(), "confusion": matrix.to_dict()}
    doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
