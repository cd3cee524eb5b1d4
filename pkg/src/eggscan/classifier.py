"""Reference patch classifier: a small tanh/softmax network trained with SGD + momentum.

Real CNNs (e.g. fine-tuned AlexNet or ResNet50) plug in through
:mod:`eggscan.backends` instead; this model exists so the training protocol
and the rest of the pipeline run at desk scale.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image, check_patch_stack
from .exceptions import ConfigurationError, InvalidInputError, TrainingError
from .patching import CLASS_INDEX, CLASSES

PARAM_NAMES = ("W1", "b1", "W2", "b2")


def _half_pixel_coords(src, dst):
    scale = src / dst
    coords = np.clip((np.arange(dst) + 0.5) * scale - 0.5, 0, src - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, coords - lo


def resize_batch(patches, target_side):
    """Bilinear resize of a (n, H, W) stack to (n, side, side) floats, half-pixel centres."""
    if int(target_side) != target_side or target_side < 1:
        raise InvalidInputError(f"target_side must be a positive integer, got {target_side}")
    arr = np.asarray(patches, dtype=np.float64)
    n, h, w = arr.shape
    if h == target_side and w == target_side:
        return arr.copy()
    ylo, yhi, fy = _half_pixel_coords(h, target_side)
    xlo, xhi, fx = _half_pixel_coords(w, target_side)
    rows = arr[:, ylo, :] * (1 - fy)[None, :, None] + arr[:, yhi, :] * fy[None, :, None]
    return rows[:, :, xlo] * (1 - fx) + rows[:, :, xhi] * fx


def resize_patch(patch, target_side):
    """Resize one 1-channel patch to ``target_side`` square, rounding back to uint8."""
    arr = check_image(patch, channels=1, name="patch")
    return resize_stack(arr[None], target_side)[0]


def resize_stack(patches, target_side, chunk=2048):
    """uint8 resize of a patch stack, processed in chunks to bound memory."""
    arr = check_patch_stack(patches)
    out = np.empty((arr.shape[0], target_side, target_side), dtype=np.uint8)
    for s in range(0, arr.shape[0], chunk):
        r = resize_batch(arr[s:s + chunk], target_side)
        out[s:s + chunk] = np.clip(np.floor(r + 0.5), 0, 255)
    return out


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ReferenceModel:
    weights: dict
    velocity: dict = None
    input_side: int = 32
    seed: int = 0
    selected_epoch: int = -1

    def __post_init__(self):
        if self.velocity is None:
            self.velocity = {k: np.zeros_like(v) for k, v in self.weights.items()}

    @property
    def n_features(self):
        return self.weights["W1"].shape[0]

    @property
    def n_classes(self):
        return self.weights["W2"].shape[1]

    def copy(self):
        return ReferenceModel({k: v.copy() for k, v in self.weights.items()},
                              {k: v.copy() for k, v in self.velocity.items()},
                              self.input_side, self.seed, self.selected_epoch)


def init_model(input_side=32, hidden=64, n_classes=len(CLASSES), seed=0, n_features=None):
    """Glorot-scaled random weights, zero biases."""
    rng = np.random.default_rng(seed)
    d = input_side * input_side if n_features is None else n_features
    weights = {
        "W1": rng.normal(0.0, np.sqrt(2.0 / (d + hidden)), size=(d, hidden)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(0.0, np.sqrt(2.0 / (hidden + n_classes)), size=(hidden, n_classes)),
        "b2": np.zeros(n_classes),
    }
    return ReferenceModel(weights, input_side=input_side, seed=seed)


def _as_features(model, batch):
    x = np.asarray(batch, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    if x.shape[1] != model.n_features:
        raise InvalidInputError(f"expected {model.n_features} features per item, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite input to forward pass")
    return x


def _cross_entropy(probs, y):
    return float(-np.mean(np.log(np.maximum(probs[np.arange(len(y)), y], 1e-300))))


def forward(model, batch, labels=None):
    """Class probabilities for a batch scaled to [0, 1]; loss is mean cross-entropy or None."""
    x = _as_features(model, batch)
    w = model.weights
    probs = softmax(np.tanh(x @ w["W1"] + w["b1"]) @ w["W2"] + w["b2"])
    loss = None if labels is None else _cross_entropy(probs, np.asarray(labels))
    return probs, loss


def loss_and_gradients(model, batch, labels):
    """Mean cross-entropy and its gradient w.r.t. every weight array."""
    x = _as_features(model, batch)
    y = np.asarray(labels)
    w = model.weights
    hidden = np.tanh(x @ w["W1"] + w["b1"])
    probs = softmax(hidden @ w["W2"] + w["b2"])
    n = x.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    dhidden = (dlogits @ w["W2"].T) * (1.0 - hidden ** 2)
    grads = {
        "W1": x.T @ dhidden,
        "b1": dhidden.sum(axis=0),
        "W2": hidden.T @ dlogits,
        "b2": dlogits.sum(axis=0),
    }
    return _cross_entropy(probs, y), grads, probs


def sgdm_update(weights, velocity, gradients, learning_rate, momentum):
    """One momentum step: v <- m*v - lr*g, w <- w + v (elementwise)."""
    g = np.asarray(gradients, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise TrainingError("non-finite gradient encountered; aborting training")
    v = momentum * np.asarray(velocity, dtype=np.float64) - learning_rate * g
    w = np.asarray(weights, dtype=np.float64) + v
    if np.ndim(w) == 0:
        return float(w), float(v)
    return w, v


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 100
    max_epochs: int = 20
    validation_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if not 0 < self.validation_fraction < 1:
            raise ConfigurationError("validation_fraction must lie in (0, 1)")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    selected_epoch: int = -1

    def to_dict(self):
        return {
            "epochs": [
                {"epoch": i, "train_loss": tl, "train_accuracy": ta, "val_loss": vl, "val_accuracy": va}
                for i, (tl, ta, vl, va) in enumerate(
                    zip(self.train_loss, self.train_accuracy, self.val_loss, self.val_accuracy))
            ],
            "selected_epoch": self.selected_epoch,
        }


def select_epoch(val_losses):
    """Earliest epoch attaining the minimum validation loss."""
    return int(np.argmin(np.asarray(val_losses, dtype=np.float64)))


def _round_half_up_int(x):
    return int(np.floor(x + 0.5))


def train_arrays(X, y, config=TrainConfig(), hidden=64, n_classes=len(CLASSES), input_side=None, log=None):
    """Train on flattened [0, 1] features ``X`` with integer labels ``y``.

    Returns the snapshot of the first epoch with the lowest validation loss.
    """
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.int64)
    X = X.reshape(X.shape[0], -1)
    n = X.shape[0]
    if len(np.unique(y)) < 2:
        raise ConfigurationError("training set must contain at least two classes")
    if n < config.batch_size:
        raise ConfigurationError(f"training set has {n} items, fewer than batch_size={config.batch_size}")
    n_val = _round_half_up_int(config.validation_fraction * n)
    if n_val < 1 or n_val >= n:
        raise ConfigurationError(f"validation split of {n_val} items leaves no data on one side")
    if input_side is None:
        input_side = int(round(np.sqrt(X.shape[1])))
    rng = np.random.default_rng(config.seed)
    model = init_model(input_side, hidden, n_classes, seed=config.seed, n_features=X.shape[1])
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    Xv, yv = X[val_idx], y[val_idx]

    history = TrainHistory()
    best = None
    for epoch in range(config.max_epochs):
        order = rng.permutation(train_idx)
        total_loss = 0.0
        correct = 0
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            loss, grads, probs = loss_and_gradients(model, X[idx], y[idx])
            total_loss += loss * len(idx)
            correct += int(np.sum(probs.argmax(axis=1) == y[idx]))
            for k in PARAM_NAMES:
                model.weights[k], model.velocity[k] = sgdm_update(
                    model.weights[k], model.velocity[k], grads[k], config.learning_rate, config.momentum)
        probs_v, val_loss = forward(model, Xv, yv)
        history.train_loss.append(total_loss / len(order))
        history.train_accuracy.append(correct / len(order))
        history.val_loss.append(val_loss)
        history.val_accuracy.append(float(np.mean(probs_v.argmax(axis=1) == yv)))
        if not np.isfinite(val_loss):
            raise TrainingError(f"validation loss became non-finite at epoch {epoch}")
        if best is None or val_loss < history.val_loss[best.selected_epoch]:
            best = model.copy()
            best.selected_epoch = epoch
        if log is not None:
            log(f"epoch {epoch + 1}/{config.max_epochs} train_loss={history.train_loss[-1]:.4f} "
                f"train_acc={history.train_accuracy[-1]:.4f} val_loss={val_loss:.4f} "
                f"val_acc={history.val_accuracy[-1]:.4f}")
    history.selected_epoch = select_epoch(history.val_loss)
    return best, history


def _encode_labels(labels):
    y = np.asarray(labels)
    if y.dtype.kind in "iu":
        if y.size and (y.min() < 0 or y.max() >= len(CLASSES)):
            raise InvalidInputError("integer labels must index the five classes")
        return y.astype(np.int64)
    try:
        return np.array([CLASS_INDEX[str(v)] for v in y], dtype=np.int64)
    except KeyError as exc:
        raise InvalidInputError(f"unknown class label {exc.args[0]!r}") from None


def _features(patches, side):
    arr = check_patch_stack(patches)
    return (resize_stack(arr, side).reshape(arr.shape[0], -1) / 255.0).astype(np.float32)


def train(patches, config=TrainConfig(), input_side=32, hidden=64, log=None):
    """Train the reference model on a list of :class:`LabeledPatch`."""
    X = _features(np.stack([lp.patch for lp in patches]), input_side)
    y = _encode_labels([lp.label for lp in patches])
    return train_arrays(X, y, config, hidden=hidden, input_side=input_side, log=log)


def save_model(model, path):
    """Write ``<path>.json`` header plus ``<path>.bin`` little-endian float32 weights."""
    path = Path(path)
    header_path = path.with_suffix(".json")
    bin_path = path.with_suffix(".bin")
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "eggscan-reference-model",
        "dtype": "<f4",
        "weights_file": bin_path.name,
        "layers": [{"name": k, "shape": list(model.weights[k].shape)} for k in PARAM_NAMES],
        "input_side": model.input_side,
        "classes": list(CLASSES),
        "seed": model.seed,
        "selected_epoch": model.selected_epoch,
    }
    with open(bin_path, "wb") as fh:
        for k in PARAM_NAMES:
            fh.write(np.ascontiguousarray(model.weights[k], dtype="<f4").tobytes())
    header_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return header_path


def load_model(path):
    header_path = Path(path).with_suffix(".json")
    try:
        header = json.loads(header_path.read_text())
        raw = np.fromfile(header_path.parent / header["weights_file"], dtype="<f4")
        weights = {}
        offset = 0
        for layer in header["layers"]:
            size = int(np.prod(layer["shape"]))
            weights[layer["name"]] = raw[offset:offset + size].astype(np.float64).reshape(layer["shape"])
            offset += size
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigurationError(f"{header_path}: malformed model file ({exc})") from exc
    if offset != raw.size or set(weights) != set(PARAM_NAMES):
        raise ConfigurationError(f"{header_path}: weight stream does not match layer shapes")
    return ReferenceModel(weights, input_side=int(header["input_side"]), seed=header.get("seed", 0),
                          selected_epoch=header.get("selected_epoch", -1))


class ReferenceClassifier(ClassifierMixin, BaseEstimator):
    """Five-class patch classifier (AL, HD, FB, Tn, BG) with an sklearn interface.

    ``X`` is a stack of 1-channel uint8 patches of any square size; they are
    resized to ``input_side`` and scaled to [0, 1]. ``predict_proba`` columns
    always follow :data:`eggscan.patching.CLASSES`.
    """

    def __init__(self, input_side=32, hidden_units=64, learning_rate=1e-4, momentum=0.9,
                 batch_size=100, max_epochs=20, validation_fraction=0.3, random_state=0, verbose=False):
        self.input_side = input_side
        self.hidden_units = hidden_units
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.verbose = verbose

    def _config(self):
        return TrainConfig(self.learning_rate, self.momentum, self.batch_size, self.max_epochs,
                           self.validation_fraction, self.random_state)

    def fit(self, X, y):
        X = _features(X, self.input_side)
        y = _encode_labels(y)
        self.model_, self.history_ = train_arrays(
            X, y, self._config(), hidden=self.hidden_units, input_side=self.input_side,
            log=print if self.verbose else None)
        self.classes_ = np.array(CLASSES)
        return self

    @classmethod
    def from_model(cls, model):
        est = cls(input_side=model.input_side, hidden_units=model.weights["W1"].shape[1],
                  random_state=model.seed)
        est.model_ = model
        est.history_ = None
        est.classes_ = np.array(CLASSES)
        return est

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_patch_stack(X)
        if X.shape[0] == 0:
            return np.zeros((0, len(CLASSES)))
        probs, _ = forward(self.model_, _features(X, self.model_.input_side))
        return probs

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_model(self.model_, path)

    @classmethod
    def load(cls, path):
        return cls.from_model(load_model(path))
