import logging
import math

import numpy as np
import pytest

from urlost.errors import InvalidArgumentError, InvalidSplitError
from urlost.evaluation import (
    EvalReport,
    ProbeConfig,
    fit_probe,
    kfold_cv,
    kfold_splits,
    linear_probe,
    pair_decoding_accuracy,
)
from urlost.rng import substream


def blobs(n_per_class, n_classes, d, seed, spread=0.15):
    rng = substream(seed, "blobs")
    centers = rng.standard_normal((n_classes, d)) * 2.0
    reps, labels = [], []
    for c in range(n_classes):
        reps.append(centers[c] + spread * rng.standard_normal((n_per_class, d)))
        labels.append(np.full(n_per_class, c))
    return np.vstack(reps), np.concatenate(labels)


class TestLinearProbe:
    def test_separable_blobs_perfect(self):
        reps, labels = blobs(30, 2, 5, seed=0, spread=0.05)
        report = linear_probe(reps, labels, reps, labels)
        assert report.accuracy == 1.0

    def test_shuffled_labels_at_chance(self):
        rng = substream(1, "chance")
        reps, _ = blobs(100, 10, 8, seed=1)
        labels = rng.integers(0, 10, size=1000)
        shuffled = rng.permutation(labels)
        report = linear_probe(reps, shuffled, reps, rng.permutation(shuffled))
        sigma = math.sqrt(1000 * 0.1 * 0.9) / 1000
        assert abs(report.accuracy - 0.1) <= 3 * sigma

    def test_scale_invariance_with_matched_l2(self):
        reps, labels = blobs(40, 3, 6, seed=2, spread=0.4)
        test_reps, test_labels = blobs(20, 3, 6, seed=2, spread=0.4)
        c = 7.3
        base = linear_probe(reps, labels, test_reps, test_labels,
                            ProbeConfig(l2=1e-3, max_epochs=2000))
        scaled = linear_probe(c * reps, labels, c * test_reps, test_labels,
                              ProbeConfig(l2=1e-3 * c * c, max_epochs=2000))
        assert abs(base.accuracy - scaled.accuracy) < 1e-10

    def test_missing_class_rejected(self):
        reps, labels = blobs(10, 3, 4, seed=3)
        test_reps, test_labels = blobs(5, 3, 4, seed=4)
        with pytest.raises(InvalidSplitError):
            linear_probe(reps[labels < 2], labels[labels < 2], test_reps, test_labels)

    def test_per_class_breakdown_consistent(self):
        reps, labels = blobs(25, 4, 5, seed=5, spread=0.3)
        report = linear_probe(reps, labels, reps, labels)
        per_class = np.array([report.per_class[str(c)] for c in range(4)])
        assert abs(per_class.mean() - report.accuracy) < 1e-12

    def test_deterministic(self):
        reps, labels = blobs(20, 3, 6, seed=6, spread=0.5)
        a = linear_probe(reps, labels, reps, labels)
        b = linear_probe(reps, labels, reps, labels)
        assert a.accuracy == b.accuracy

    def test_standardization_rescues_tiny_features(self):
        reps, labels = blobs(40, 4, 6, seed=8, spread=0.25)
        tiny = reps * 1e-3  # scale far below the probe's default step sizes
        cfg_std = ProbeConfig(max_epochs=300)
        cfg_raw = ProbeConfig(max_epochs=300, standardize=False)
        std_acc = linear_probe(tiny, labels, tiny, labels, cfg_std).accuracy
        raw_acc = linear_probe(reps, labels, reps, labels, cfg_raw).accuracy
        assert std_acc >= raw_acc - 1e-9
        # standardized probing is exactly scale-invariant
        scaled_acc = linear_probe(1e4 * tiny, labels, 1e4 * tiny, labels, cfg_std).accuracy
        assert scaled_acc == std_acc


class TestProbeOptimizer:
    def test_converges_to_small_gradient(self):
        reps, labels = blobs(30, 2, 3, seed=7, spread=0.6)
        probe = fit_probe(reps, labels, ProbeConfig(l2=1e-2, max_epochs=5000,
                                                    standardize=False))
        # gradient at the returned point
        classes, y = np.unique(labels, return_inverse=True)
        onehot = np.eye(len(classes))[y]
        z = reps @ probe.weights.T + probe.bias
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        g_w = (p - onehot).T @ reps / len(reps) + 2e-2 * probe.weights
        assert np.sqrt((g_w**2).sum()) < 1e-4


class TestPairDecoding:
    def test_identical_reps_perfect(self):
        reps = substream(8, "pd").standard_normal((40, 6))
        assert pair_decoding_accuracy(reps, reps) == 1.0

    def test_noise_reps_at_null_rate(self):
        rng = substream(9, "pd-null")
        first = rng.standard_normal((100, 8))
        second = rng.standard_normal((100, 8))
        acc = pair_decoding_accuracy(first, second)
        sigma = math.sqrt(100 * 0.01 * 0.99) / 100
        assert abs(acc - 0.01) <= 3 * sigma

    def test_row_rescaling_invariance(self):
        rng = substream(10, "pd-scale")
        first = rng.standard_normal((30, 5))
        second = first + 0.1 * rng.standard_normal((30, 5))
        scales = rng.uniform(0.1, 10.0, size=(30, 1))
        assert pair_decoding_accuracy(first, second) == pair_decoding_accuracy(
            first * scales, second)

    def test_tie_breaks_to_lowest_index(self):
        first = np.array([[1.0, 0.0]])
        second = np.array([[2.0, 0.0]])
        assert pair_decoding_accuracy(first, second) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            pair_decoding_accuracy(np.zeros((3, 2)), np.zeros((4, 2)))


class TestKfold:
    def test_splits_partition_and_depend_only_on_seed(self):
        a = kfold_splits(17, 5, seed=0)
        b = kfold_splits(17, 5, seed=0)
        c = kfold_splits(17, 5, seed=1)
        assert sorted(np.concatenate(a).tolist()) == list(range(17))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert any(not np.array_equal(x, y) for x, y in zip(a, c))

    def test_leave_one_out_fold_sizes(self):
        folds = kfold_splits(10, 10, seed=3)
        assert [len(f) for f in folds] == [1] * 10

    def test_constant_representation_gives_majority_rate(self):
        labels = np.array([0] * 70 + [1] * 30)
        signals = np.ones((100, 4))

        def fit_predict(train_x, train_y, test_x):
            values, counts = np.unique(train_y, return_counts=True)
            return np.full(len(test_x), values[np.argmax(counts)])

        report = kfold_cv(signals, labels, 5, fit_predict, seed=0)
        assert abs(report.accuracy - 0.7) < 0.05

    def test_missing_class_fold_retained(self, caplog):
        labels = np.array([0] * 9 + [1])  # class 1 appears once
        signals = substream(11, "kf").standard_normal((10, 3))

        def fit_predict(train_x, train_y, test_x):
            return np.zeros(len(test_x), dtype=np.int64)

        with caplog.at_level(logging.WARNING):
            report = kfold_cv(signals, labels, 10, fit_predict, seed=0)
        assert len(report.folds) == 10

    def test_report_serializes(self):
        report = EvalReport("t", 0.5, {"0": 0.5}, [0.4, 0.6], {"k": 2}, 3)
        blob = report.to_dict()
        assert blob["accuracy"] == 0.5 and blob["folds"] == [0.4, 0.6]
