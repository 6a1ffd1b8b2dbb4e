"""Downstream evaluation: linear probing, paired decoding, k-fold CV.

The probe is multinomial logistic regression trained full-batch on frozen
representations; paired decoding matches each stimulus's first-presentation
representation to its second presentation by cosine nearest neighbor; k-fold
cross-validation refits the whole representation pipeline per fold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidArgumentError, InvalidSplitError
from .rng import substream

log = logging.getLogger(__name__)


@dataclass
class ProbeConfig:
    l2: float = 1e-4
    max_epochs: int = 500
    learning_rate: float = 0.1
    grad_tol: float = 1e-6
    seed: int = 0
    standardize: bool = True  # z-score features on the training split first


@dataclass
class ProbeModel:
    weights: np.ndarray  # (num_classes, d)
    bias: np.ndarray  # (num_classes,)
    classes: np.ndarray
    feature_mean: np.ndarray | None = None
    feature_scale: np.ndarray | None = None

    def transform(self, reps: np.ndarray) -> np.ndarray:
        reps = np.asarray(reps, dtype=np.float64)
        if self.feature_mean is None:
            return reps
        return (reps - self.feature_mean) / self.feature_scale

    def predict(self, reps: np.ndarray) -> np.ndarray:
        scores = self.transform(reps) @ self.weights.T + self.bias
        return self.classes[np.argmax(scores, axis=1)]


@dataclass
class EvalReport:
    task: str
    accuracy: float
    per_class: dict[str, float]
    folds: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "accuracy": self.accuracy,
            "per_class": self.per_class,
            "folds": self.folds,
            "config": self.config,
            "seed": self.seed,
        }


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def fit_probe(
    reps: np.ndarray, labels: np.ndarray, config: ProbeConfig | None = None
) -> ProbeModel:
    """Multinomial logistic regression via full-batch Adam from a zero init.

    Features are z-scored on the training split by default (constant features
    left alone), which makes the probe insensitive to representation scale.
    The objective (cross-entropy + l2 * |W|^2, bias unpenalized) is convex;
    optimization stops at ``max_epochs`` or when the gradient norm falls
    below ``grad_tol``.
    """
    config = config or ProbeConfig()
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    mean = scale = None
    if config.standardize:
        mean = reps.mean(axis=0)
        std = reps.std(axis=0)
        scale = np.where(std < 1e-12, 1.0, std)
        reps = (reps - mean) / scale
    classes, y = np.unique(labels, return_inverse=True)
    n, d = reps.shape
    k = len(classes)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0
    w = np.zeros((k, d))
    b = np.zeros(k)
    m_w = np.zeros_like(w); v_w = np.zeros_like(w)
    m_b = np.zeros_like(b); v_b = np.zeros_like(b)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for step in range(1, config.max_epochs + 1):
        probs = _softmax(reps @ w.T + b)
        err = (probs - onehot) / n
        g_w = err.T @ reps + 2.0 * config.l2 * w
        g_b = err.sum(axis=0)
        gnorm = np.sqrt((g_w**2).sum() + (g_b**2).sum())
        if gnorm < config.grad_tol:
            break
        m_w = beta1 * m_w + (1 - beta1) * g_w
        v_w = beta2 * v_w + (1 - beta2) * g_w**2
        m_b = beta1 * m_b + (1 - beta1) * g_b
        v_b = beta2 * v_b + (1 - beta2) * g_b**2
        bc1 = 1 - beta1**step
        bc2 = 1 - beta2**step
        w -= config.learning_rate * (m_w / bc1) / (np.sqrt(v_w / bc2) + eps)
        b -= config.learning_rate * (m_b / bc1) / (np.sqrt(v_b / bc2) + eps)
    return ProbeModel(w, b, classes, feature_mean=mean, feature_scale=scale)


def linear_probe(
    train_reps: np.ndarray,
    train_labels: np.ndarray,
    test_reps: np.ndarray,
    test_labels: np.ndarray,
    config: ProbeConfig | None = None,
    task: str = "linear-probe",
) -> EvalReport:
    """Train a probe on frozen representations, report top-1 test accuracy."""
    config = config or ProbeConfig()
    train_classes = set(np.unique(train_labels).tolist())
    missing = sorted(set(np.unique(test_labels).tolist()) - train_classes)
    if missing:
        raise InvalidSplitError(f"classes absent from training labels: {missing}")
    probe = fit_probe(train_reps, train_labels, config)
    pred = probe.predict(np.asarray(test_reps, dtype=np.float64))
    test_labels = np.asarray(test_labels)
    correct = pred == test_labels
    per_class = {
        str(int(c)): float(correct[test_labels == c].mean())
        for c in np.unique(test_labels)
    }
    return EvalReport(
        task=task,
        accuracy=float(correct.mean()),
        per_class=per_class,
        config={"l2": config.l2, "max_epochs": config.max_epochs},
        seed=config.seed,
    )


def pair_decoding_accuracy(reps_first: np.ndarray, reps_second: np.ndarray) -> float:
    """Fraction of rows whose cosine nearest neighbor in the second
    presentation is the matching row (ties go to the lowest index)."""
    a = np.asarray(reps_first, dtype=np.float64)
    b = np.asarray(reps_second, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"presentation shapes differ: {a.shape} vs {b.shape}")

    def unit(x: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        return x / np.where(norms == 0, 1.0, norms)

    sims = unit(a) @ unit(b).T
    pred = np.argmax(sims, axis=1)  # argmax returns the first (lowest) maximizer
    return float((pred == np.arange(len(a))).mean())


def kfold_splits(n: int, k_folds: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle, then contiguous folds; folds partition {0..n-1}."""
    if not 2 <= k_folds <= n:
        raise InvalidArgumentError(f"k_folds must lie in [2, {n}], got {k_folds}")
    order = substream(seed, "kfold").permutation(n)
    return [np.sort(part) for part in np.array_split(order, k_folds)]


def kfold_cv(
    signals: np.ndarray,
    labels: np.ndarray,
    k_folds: int,
    fit_predict: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
    seed: int = 0,
    task: str = "kfold-cv",
) -> EvalReport:
    """Cross-validate a full pipeline; ``fit_predict(train_x, train_y, test_x)``
    must refit representation learning on the train folds only."""
    signals = np.asarray(signals)
    labels = np.asarray(labels)
    folds = kfold_splits(len(signals), k_folds, seed)
    fold_acc: list[float] = []
    all_pred = np.empty(len(labels), dtype=labels.dtype)
    for i, test_idx in enumerate(folds):
        train_idx = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
        if set(np.unique(labels[test_idx])) - set(np.unique(labels[train_idx])):
            log.warning("fold %d: some test classes unseen in training; fold retained", i)
        pred = fit_predict(signals[train_idx], labels[train_idx], signals[test_idx])
        fold_acc.append(float((pred == labels[test_idx]).mean()))
        all_pred[test_idx] = pred
    correct = all_pred == labels
    per_class = {
        str(int(c)): float(correct[labels == c].mean()) for c in np.unique(labels)
    }
    return EvalReport(
        task=task,
        accuracy=float(np.mean(fold_acc)),
        per_class=per_class,
        folds=fold_acc,
        config={"k_folds": k_folds},
        seed=seed,
    )
