"""Patch-based parasitic egg detection for low-magnification microscope images."""

from .classifier import ReferenceClassifier
from .detector import PatchDetector
from .exceptions import BackendError, ConfigurationError, InvalidInputError
from .patching import CLASSES, EGG_CLASSES, Annotation, BoundingBox, GridConfig

__version__ = "0.1.0"

__all__ = [
    "CLASSES",
    "EGG_CLASSES",
    "Annotation",
    "BackendError",
    "BoundingBox",
    "ConfigurationError",
    "GridConfig",
    "InvalidInputError",
    "PatchDetector",
    "ReferenceClassifier",
]
