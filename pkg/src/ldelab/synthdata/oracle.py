"""Closed-form linear baselines that certify the synthetic task is learnable."""

from __future__ import annotations

import numpy as np

from ldelab.errors import ArgumentError


def utterance_means(frames_list) -> np.ndarray:
    return np.stack([np.asarray(f, dtype=np.float64).mean(axis=0) for f in frames_list])


class LeastSquaresClassifier:
    """One-vs-all least-squares regression onto one-hot labels, with a bias column."""

    def __init__(self, weights: np.ndarray, classes: np.ndarray):
        self.weights = weights
        self.classes = classes

    @classmethod
    def fit(cls, features, labels) -> "LeastSquaresClassifier":
        x = np.asarray(features, dtype=np.float64)
        classes, inv = np.unique(np.asarray(labels), return_inverse=True)
        if classes.size < 2:
            raise ArgumentError("classifier needs at least two classes")
        xa = np.hstack([x, np.ones((len(x), 1))])
        w, *_ = np.linalg.lstsq(xa, np.eye(classes.size)[inv], rcond=None)
        return cls(w, classes)

    def decision(self, features) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        return np.hstack([x, np.ones((len(x), 1))]) @ self.weights

    def predict(self, features) -> np.ndarray:
        return self.classes[np.argmax(self.decision(features), axis=1)]

    def accuracy(self, features, labels) -> float:
        return float(np.mean(self.predict(features) == np.asarray(labels)))
