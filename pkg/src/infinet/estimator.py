"""scikit-learn style wrapper around the InfiNet trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from .data import from_arrays
from .interaction import parse_kind
from .model import build_demo_net, build_model, get_variant, predict_logits
from .tensor import PRECISIONS
from .training import TrainConfig, log_softmax, train


def check_images(X, channels: int = 3) -> np.ndarray:
    """Coerce ``X`` to a float ``(N, H, W, C)`` array with values in ``[0, 1]``."""
    X = np.asarray(X)
    if X.dtype.kind not in "fiu":
        raise ValueError(f"images must be numeric, got dtype {X.dtype}")
    if X.ndim != 4 or X.shape[-1] != channels:
        raise ValueError(f"images must have shape (N, H, W, {channels}), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    X = X.astype(np.float64, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinity")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValueError(f"expected {n} labels in a 1-d array, got shape {y.shape}")
    check_classification_targets(y)
    return y


class InfiNetClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier on top of the numpy InfiNet.

    ``variant`` is a family name (``micro``, ``test``, ``tiny``, ...) or
    ``"demo"`` for the flat eight-block demo network. Images are channels-last
    floats in ``[0, 1]``; any spatial size that survives the downsampling works.
    """

    def __init__(self, variant="micro", kind="rbf", epochs=10, batch_size=32, lr=None,
                 weight_decay=0.05, label_smoothing=0.1, width=32, seed=0, precision="f32"):
        self.variant = variant
        self.kind = kind
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.label_smoothing = label_smoothing
        self.width = width
        self.seed = seed
        self.precision = precision

    def _build(self, n_classes: int, size: int):
        dtype = PRECISIONS[self.precision]
        kind = parse_kind(self.kind) if isinstance(self.kind, str) else self.kind
        if self.variant == "demo":
            return build_demo_net(kind, n_classes, seed=self.seed, dtype=dtype, width=self.width)
        cfg = get_variant(self.variant, kind=kind, num_classes=n_classes, input_size=size)
        return build_model(cfg, seed=self.seed, dtype=dtype)

    def fit(self, X, y):
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        X = check_images(X)
        y = check_labels(y, len(X))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.image_shape_ = X.shape[1:]
        self.model_ = self._build(len(self.classes_), X.shape[1])
        cfg = TrainConfig(total_epochs=self.epochs, batch_size=self.batch_size, base_lr=self.lr,
                          weight_decay=self.weight_decay, label_smoothing=self.label_smoothing,
                          seed=self.seed)
        self.history_ = train(self.model_, from_arrays(X, encoded), cfg).rows
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X)
        if X.shape[1:] != self.image_shape_:
            raise ValueError(f"fitted on images of shape {self.image_shape_}, got {X.shape[1:]}")
        return predict_logits(self.model_, X.astype(self.model_.dtype))

    def decision_function(self, X) -> np.ndarray:
        return self._logits(X)

    def predict_proba(self, X) -> np.ndarray:
        return np.exp(log_softmax(self._logits(X).astype(np.float64)))

    def predict(self, X) -> np.ndarray:
        logits = self._logits(X)
        return self.classes_[logits.argmax(axis=1)]
