"""Seven-way weather/lighting classifier on hand-built image features.

A weighted nearest-centroid model: each class is summarised by the mean of
its feature vectors and every feature is weighted by the inverse of its
pooled within-class variance. ``ConditionClassifier`` wraps the functional
API in a scikit-learn estimator.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .augment import ConditionLabel
from .errors import CoverageError, EmptyDatasetError, InputError
from .media import require_rgb

N_CLASSES = len(ConditionLabel)
HIST_BINS = 16
MODEL_VERSION = "pavc-centroid-1"
EDGE_THRESHOLD = 0.08
RIDGE_THRESHOLD = 0.03
_VAR_FLOOR = 1e-6
_LOG_OFFSET = 1e-4


@dataclass(frozen=True)
class FeatureVector:
    mean_lightness: float
    lightness_histogram: Tuple[float, ...]
    edge_density: float
    vertical_streak_energy: float
    high_freq_energy: float

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.mean_lightness, *self.lightness_histogram, self.edge_density,
             self.vertical_streak_energy, self.high_freq_energy],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, arr) -> "FeatureVector":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(float(arr[0]), tuple(float(v) for v in arr[1:1 + HIST_BINS]),
                   float(arr[-3]), float(arr[-2]), float(arr[-1]))


FEATURE_NAMES = (
    ["mean_lightness"]
    + [f"hist_{i:02d}" for i in range(HIST_BINS)]
    + ["edge_density", "vertical_streak_energy", "high_freq_energy"]
)


def extract_features(frame) -> FeatureVector:
    """Size-independent features: every term is a mean or a pixel fraction."""
    px = require_rgb(frame)
    light = (px.max(axis=-1).astype(np.float64) + px.min(axis=-1)) / 510.0

    hist, _ = np.histogram(light, bins=HIST_BINS, range=(0.0, 1.0))
    hist = hist / hist.sum()

    gy, gx = np.gradient(light)
    edge_density = float(np.mean(np.hypot(gx, gy) > EDGE_THRESHOLD))

    # thin bright vertical structures: brighter than both horizontal
    # neighbours two pixels away, continued in the rows above and below
    ridge = np.zeros_like(light)
    if light.shape[1] > 4:
        ridge[:, 2:-2] = light[:, 2:-2] - np.maximum(light[:, :-4], light[:, 4:])
    hit = ridge > RIDGE_THRESHOLD
    cont = np.zeros_like(hit)
    if light.shape[0] > 2:
        cont[1:-1] = hit[1:-1] & (ridge[:-2] > RIDGE_THRESHOLD / 2) & (ridge[2:] > RIDGE_THRESHOLD / 2)
    streak = float(np.mean(cont))

    lap = np.zeros_like(light)
    if min(light.shape) > 2:
        lap[1:-1, 1:-1] = (
            4 * light[1:-1, 1:-1] - light[:-2, 1:-1] - light[2:, 1:-1] - light[1:-1, :-2] - light[1:-1, 2:]
        )
    hf = float(np.mean(np.abs(lap)))

    return FeatureVector(float(light.mean()), tuple(float(v) for v in hist), edge_density, streak, hf)


def feature_matrix(frames) -> np.ndarray:
    return np.stack([extract_features(f).to_array() for f in frames])


@dataclass(frozen=True)
class ClassifierModel:
    centroids: np.ndarray  # (7, n_features), in model space
    weights: np.ndarray  # (n_features,)
    priors: np.ndarray  # (7,)
    version: str = MODEL_VERSION

    def __post_init__(self):
        if self.centroids.shape[0] != N_CLASSES or self.priors.shape != (N_CLASSES,):
            raise InputError("classifier model must cover exactly 7 classes")
        if np.any(self.weights < 0):
            raise InputError("feature weights must be non-negative")

    def to_dict(self):
        return {
            "version": self.version,
            "features": FEATURE_NAMES,
            "centroids": self.centroids.tolist(),
            "weights": self.weights.tolist(),
            "priors": self.priors.tolist(),
        }

    @classmethod
    def from_dict(cls, doc) -> "ClassifierModel":
        if doc.get("version") != MODEL_VERSION:
            raise InputError(f"unsupported classifier model version {doc.get('version')!r}")
        return cls(np.asarray(doc["centroids"], float), np.asarray(doc["weights"], float),
                   np.asarray(doc["priors"], float), doc["version"])

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read classifier model {path}: {exc}") from exc
        return cls.from_dict(doc)


def model_space(X: np.ndarray) -> np.ndarray:
    """Log-compress the three gradient features; their class gaps are ratios."""
    X = np.array(X, dtype=np.float64)
    X[..., -3:] = np.log(X[..., -3:] + _LOG_OFFSET)
    return X


def fit_features(X: np.ndarray, y: Sequence[int]) -> ClassifierModel:
    """Fit on raw feature rows (see ``FEATURE_NAMES``)."""
    X = model_space(X)
    y = np.asarray([int(v) for v in y])
    counts = np.bincount(y, minlength=N_CLASSES)
    missing = [ConditionLabel(c).slug for c in range(N_CLASSES) if counts[c] < 2]
    if missing:
        raise CoverageError(f"every class needs >= 2 examples; short: {', '.join(missing)}")
    centroids = np.stack([X[y == c].mean(axis=0) for c in range(N_CLASSES)])
    resid = X - centroids[y]
    pooled = (resid**2).sum(axis=0) / max(1, len(y) - N_CLASSES)
    weights = 1.0 / (pooled + _VAR_FLOOR)
    return ClassifierModel(centroids, weights, counts / counts.sum())


def fit(labeled: Sequence[Tuple[object, int]]) -> ClassifierModel:
    """Fit from ``(frame, label)`` pairs. Result does not depend on input order
    beyond floating-point summation."""
    if not labeled:
        raise EmptyDatasetError("no training examples")
    frames, labels = zip(*labeled)
    return fit_features(feature_matrix(frames), labels)


def distances(model: ClassifierModel, features: np.ndarray) -> np.ndarray:
    diff = model_space(features)[..., None, :] - model.centroids
    return (diff**2 * model.weights).sum(axis=-1)


def classify(model: ClassifierModel, frame) -> Tuple[ConditionLabel, np.ndarray]:
    """Return the nearest class and the 7 weighted distances; ties go to the
    lowest class code (``np.argmin`` returns the first minimum)."""
    d = distances(model, extract_features(frame).to_array())
    return ConditionLabel(int(np.argmin(d))), d


def timed_classify(model: ClassifierModel, frame):
    """``classify`` plus its wall-clock duration in seconds."""
    start = time.perf_counter()
    label, scores = classify(model, frame)
    return label, scores, time.perf_counter() - start


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray = field(default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), int))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def is_diagonal(self) -> bool:
        return not np.any(self.counts - np.diag(np.diag(self.counts)))

    def is_diagonal_dominant(self) -> bool:
        diag = np.diag(self.counts)
        off = self.counts.sum(axis=1) - diag
        return bool(np.all(diag > off))

    def to_dict(self):
        return {
            "labels": [c.slug for c in ConditionLabel],
            "counts": self.counts.tolist(),
            "accuracy": self.accuracy,
            "total": self.total,
        }

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\predicted"] + [c.slug for c in ConditionLabel])
            for c in ConditionLabel:
                w.writerow([c.slug] + [int(v) for v in self.counts[c]])
        return path


def confusion_from_labels(y_true, y_pred) -> ConfusionMatrix:
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=int)
    for t, p in zip(y_true, y_pred):
        counts[int(t), int(p)] += 1
    return ConfusionMatrix(counts)


def evaluate(model: ClassifierModel, test: Sequence[Tuple[object, int]]) -> ConfusionMatrix:
    if not test:
        raise EmptyDatasetError("empty test set")
    preds = [classify(model, f)[0] for f, _ in test]
    return confusion_from_labels([t for _, t in test], preds)


def split_counts(n: int, ratios=(0.75, 0.15, 0.10)) -> Tuple[int, int, int]:
    """Validation and test sizes round to nearest; training takes the rest.

    2,387 images -> (1790, 358, 239).
    """
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    return n - n_val - n_test, n_val, n_test


def train_val_test_split(items: Sequence, seed: int = 0, ratios=(0.75, 0.15, 0.10)):
    n_train, n_val, _ = split_counts(len(items), ratios)
    order = np.random.default_rng(seed).permutation(len(items))
    pick = lambda idx: [items[i] for i in idx]
    return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])


class FeatureExtractor(BaseEstimator, TransformerMixin):
    """Frames -> (n_samples, 20) feature matrix."""

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return feature_matrix(X)


class ConditionClassifier(BaseEstimator, ClassifierMixin):
    """scikit-learn front end for the centroid model.

    ``X`` is a sequence of RGB frames (arrays or ``Frame``), ``y`` condition codes.
    """

    def fit(self, X, y):
        if len(X) != len(y):
            raise InputError(f"X has {len(X)} frames but y has {len(y)} labels")
        self.model_ = fit_features(feature_matrix(X), y)
        self.classes_ = np.arange(N_CLASSES)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return -distances(self.model_, feature_matrix(X))

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    @classmethod
    def from_model(cls, model: ClassifierModel) -> "ConditionClassifier":
        est = cls()
        est.model_ = model
        est.classes_ = np.arange(N_CLASSES)
        return est
