"""Sliding-window egg detector: preprocessing, patch classification and map fusion."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .augment import AugmentSpec, BackgroundPool, build_balanced_set
from .backends import classify_batch
from .classifier import ReferenceClassifier
from .exceptions import InvalidInputError
from .fusion import fuse, gaussian_kernel, predict_image
from .patching import CLASSES, GridConfig, label_patches, patch_positions, patch_stack
from .preprocess import preprocess


class PatchDetector(BaseEstimator):
    """Whole-image egg detector built on any patch classification backend.

    ``classifier`` is either an estimator with ``fit`` (trained by
    :meth:`fit` on a balanced augmented patch set) or an already-initialised
    backend exposing ``input_side`` and ``predict_proba``, such as
    :class:`eggscan.backends.ExternalBackend`. ``None`` means a default
    :class:`ReferenceClassifier`.
    """

    def __init__(self, classifier=None, patch_size=100, stride=20, sigma=1.0, threshold=0.5,
                 augment=None, low_pct=0.01, high_pct=0.99):
        self.classifier = classifier
        self.patch_size = patch_size
        self.stride = stride
        self.sigma = sigma
        self.threshold = threshold
        self.augment = augment
        self.low_pct = low_pct
        self.high_pct = high_pct

    @property
    def grid_config(self):
        return GridConfig(self.patch_size, self.stride)

    def _preprocess(self, image):
        return preprocess(image, self.low_pct, self.high_pct)

    def _augment_spec(self):
        spec = self.augment if self.augment is not None else AugmentSpec()
        if spec.patch_size != self.patch_size:
            spec = AugmentSpec(**{**spec.__dict__, "patch_size": self.patch_size})
        return spec

    def training_set(self, images, annotations):
        """Balanced, augmented :class:`LabeledPatch` list built from raw images."""
        if len(images) != len(annotations):
            raise InvalidInputError(f"{len(images)} images but {len(annotations)} annotation lists")
        grays = [self._preprocess(img) for img in images]
        labels = [label_patches(patch_positions(g.shape[1], g.shape[0], self.grid_config), anns)
                  for g, anns in zip(grays, annotations)]
        pool = BackgroundPool.from_labels(grays, labels, self.patch_size)
        return build_balanced_set(list(zip(grays, annotations)), pool, self._augment_spec())

    def fit(self, images, annotations):
        clf = self.classifier if self.classifier is not None else ReferenceClassifier()
        if hasattr(clf, "fit"):
            patches = self.training_set(images, annotations)
            X = np.stack([lp.patch for lp in patches])
            y = [lp.label for lp in patches]
            del patches
            clf.fit(X, y)
        self.backend_ = clf
        self.kernel_ = gaussian_kernel(self.patch_size, self.sigma)
        return self

    def attach(self, backend):
        """Use an already trained backend without fitting."""
        self.backend_ = backend
        self.kernel_ = gaussian_kernel(self.patch_size, self.sigma)
        return self

    def _patch_probs(self, gray):
        grid = patch_positions(gray.shape[1], gray.shape[0], self.grid_config)
        return grid, classify_batch(self.backend_, patch_stack(gray, grid))

    def predict_map(self, image):
        """``(preprocessed image, probability map of shape (H, W, 5))``."""
        check_is_fitted(self, "backend_")
        gray = self._preprocess(image)
        grid, probs = self._patch_probs(gray)
        return gray, fuse(grid.positions, probs, self.kernel_, grid.image_size)

    def predict_one(self, image):
        return predict_image(self.predict_map(image)[1], self.threshold)

    def predict(self, images):
        """One :class:`Detection` per image."""
        return [self.predict_one(img) for img in images]

    def patch_predictions(self, image, annotations):
        """Ground-truth labels and argmax predictions for every grid patch of ``image``."""
        check_is_fitted(self, "backend_")
        gray = self._preprocess(image)
        grid, probs = self._patch_probs(gray)
        truth = [label for _, label in label_patches(grid, annotations)]
        return truth, [CLASSES[i] for i in probs.argmax(axis=1)]
