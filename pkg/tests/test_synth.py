import hashlib

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from eggscan.exceptions import ConfigurationError
from eggscan.manifest import read_manifest
from eggscan.patching import EGG_CLASSES
from eggscan.preprocess import preprocess
from eggscan.synth import (DEFAULT_MIX, REFERENCE_IMAGE_COUNTS, SynthSpec, apportion, class_assignment, egg_features,
                           generate_dataset, generate_image, render_image)


def boxes_overlap(a, b):
    return not (a.x + a.w <= b.x or b.x + b.w <= a.x or a.y + a.h <= b.y or b.y + b.h <= a.y)


class TestImages:
    def test_deterministic(self):
        spec = SynthSpec()
        a, anns_a = generate_image(spec, [0, 3])
        b, anns_b = generate_image(spec, [0, 3])
        assert_array_equal(a, b)
        assert anns_a == anns_b
        c, _ = generate_image(spec, [0, 4])
        assert not np.array_equal(a, c)

    @pytest.mark.parametrize("draw", range(12))
    def test_annotation_invariants(self, draw):
        spec = SynthSpec(seed=1)
        image, anns = generate_image(spec, [1, draw])
        assert image.shape == (480, 640, 3) and image.dtype == np.uint8
        assert 1 <= len(anns) <= 3
        assert len({a.class_label for a in anns}) == 1
        for i, a in enumerate(anns):
            b = a.bbox
            assert b.w <= 100 and b.h <= 100
            assert spec.border_margin <= b.x and b.x + b.w <= 640 - spec.border_margin
            assert spec.border_margin <= b.y and b.y + b.h <= 480 - spec.border_margin
            assert not any(boxes_overlap(b, o.bbox) for o in anns[i + 1:])

    def test_requested_class(self):
        for c in EGG_CLASSES:
            _, anns = generate_image(SynthSpec(), [2, 0], c)
            assert {a.class_label for a in anns} == {c}

    def test_egg_darker_than_background(self):
        image, _, eggs = render_image(SynthSpec(), [0, 1], "Tn")
        gray = preprocess(image)
        _, _, contrast = egg_features(gray, eggs[0])
        assert contrast > 0


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"eggs_per_image": (0, 2)}, {"eggs_per_image": (2, 4)},
                                        {"class_mix": (0.5, 0.5, 0.5, -0.5)}, {"class_mix": (1.0,)},
                                        {"image_size": (90, 200)}, {"noise_sigma": -1.0},
                                        {"border_margin": 200}, {"border_margin": -1}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            SynthSpec(**kwargs)

    def test_default_mix(self):
        assert sum(DEFAULT_MIX) == pytest.approx(1.0)
        assert DEFAULT_MIX[0] == pytest.approx(67 / 162)


class TestApportion:
    def test_reference_total(self):
        assert apportion(162, DEFAULT_MIX) == list(REFERENCE_IMAGE_COUNTS)

    def test_small_uniform(self):
        assert apportion(4, [0.25] * 4) == [1, 1, 1, 1]

    def test_sums(self, rng):
        for n in [1, 7, 160, 1001]:
            w = rng.random(4)
            counts = apportion(n, w)
            assert sum(counts) == n
            assert all(abs(c - n * wi / w.sum()) < 1 for c, wi in zip(counts, w))

    def test_assignment_histogram(self):
        labels = class_assignment(SynthSpec(seed=2), 160)
        assert [labels.count(c) for c in EGG_CLASSES] == apportion(160, DEFAULT_MIX)


def test_dataset_reproducible(tmp_path):
    spec = SynthSpec(seed=7)

    def digest(out):
        manifest, entries = generate_dataset(spec, 4, out)
        h = hashlib.sha256(manifest.read_bytes())
        for e in entries:
            h.update(e.image_path.read_bytes())
        return h.hexdigest(), manifest

    d1, manifest = digest(tmp_path / "a")
    d2, _ = digest(tmp_path / "b")
    assert d1 == d2
    entries = read_manifest(manifest)
    assert len(entries) == 4 and all(e.image_path.exists() for e in entries)


def test_class_features_separable():
    # nearest centroid on standardized (area, eccentricity, rim contrast) features
    spec = SynthSpec(image_size=(240, 240), border_margin=10, seed=3)
    feats, labels = [], []
    i = 0
    while len(feats) < 1000:
        image, _, eggs = render_image(spec, [3, i], EGG_CLASSES[i % 4])
        gray = preprocess(image)
        for e in eggs:
            feats.append(egg_features(gray, e))
            labels.append(e.class_label)
        i += 1
    X = np.asarray(feats)
    y = np.asarray(labels)
    Z = (X - X.mean(axis=0)) / X.std(axis=0)
    train = np.arange(len(y)) % 2 == 0
    centroids = np.stack([Z[train & (y == c)].mean(axis=0) for c in EGG_CLASSES])
    d = ((Z[~train, None, :] - centroids[None]) ** 2).sum(axis=2)
    pred = np.asarray(EGG_CLASSES)[d.argmin(axis=1)]
    assert np.mean(pred == y[~train]) >= 0.95
