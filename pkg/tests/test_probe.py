import numpy as np
import pytest

from clusterfit import (
    DegenerateInputError,
    FeatureMatrix,
    LabelVector,
    LinearProbe,
    ProbeConfig,
    ShapeError,
    probe_eval,
    probe_fit,
)
from clusterfit.probe import LinearClassifier


def test_separable_blobs_reach_perfect_train_top1(two_blobs):
    feats, labels = two_blobs
    clf = probe_fit(feats, labels, ProbeConfig(epochs=10, lr0=0.1, seed=0))
    result = probe_eval(clf, feats, labels, feats, labels)
    assert result.train_top1 == 1.0


def test_constant_features_hit_majority_frequency():
    rng = np.random.default_rng(1)
    y = (rng.random(2000) < 0.7).astype(int)  # class 0 is the 70% majority
    feats = FeatureMatrix(np.ones((2000, 4)))
    labels = LabelVector(y, num_classes=2)
    clf = probe_fit(feats, labels, ProbeConfig(epochs=5, lr0=0.1, seed=0))
    result = probe_eval(clf, feats, labels)
    majority = max(np.bincount(y)) / len(y)
    assert abs(result.top1 - majority) < 0.02


def test_zero_epochs_uniform_argmax(two_blobs):
    feats, labels = two_blobs
    clf = probe_fit(feats, labels, ProbeConfig(epochs=0, seed=0))
    np.testing.assert_array_equal(clf.weights, 0.0)
    result = probe_eval(clf, feats, labels)
    # zero classifier + lowest-id tie-break: everything predicted class 0
    assert abs(result.top1 - 0.5) < 1e-12


def test_memorizable_three_points():
    X = FeatureMatrix(np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]))
    y = LabelVector(np.array([0, 1, 2]), num_classes=3)
    clf = probe_fit(X, y, ProbeConfig(epochs=200, lr0=0.5, batch_size=3, seed=0))
    assert probe_eval(clf, X, y).top1 == 1.0


def test_counting_example():
    clf = LinearClassifier(weights=np.array([[1.0], [0.0]]), bias=np.array([1.0, 0.0]))
    feats = FeatureMatrix(np.ones((4, 1)))  # always predicts class 0
    labels = LabelVector(np.array([0, 1, 0, 1]), num_classes=2)
    assert probe_eval(clf, feats, labels).top1 == 0.5


def test_top1_matches_recount_oracle(two_blobs):
    feats, labels = two_blobs
    clf = probe_fit(feats, labels, ProbeConfig(epochs=3, lr0=0.05, seed=1))
    result = probe_eval(clf, feats, labels)
    # independent recount of argmax matches
    scores = feats.data @ clf.weights.T + clf.bias
    recount = sum(int(np.argmax(s)) == y for s, y in zip(scores, labels.labels))
    assert result.top1 == recount / feats.n


def test_features_never_mutated(two_blobs):
    feats, labels = two_blobs
    before = feats.data.tobytes()
    probe_fit(feats, labels, ProbeConfig(epochs=5, lr0=0.1, seed=0))
    assert feats.data.tobytes() == before


def test_class_permutation_invariance(two_blobs):
    feats, labels = two_blobs
    clf = probe_fit(feats, labels, ProbeConfig(epochs=5, lr0=0.1, seed=2))
    base = probe_eval(clf, feats, labels)
    perm = np.array([1, 0])
    permuted_clf = LinearClassifier(weights=clf.weights[perm], bias=clf.bias[perm])
    permuted_labels = LabelVector(perm[labels.labels], num_classes=2)
    swapped = probe_eval(permuted_clf, feats, permuted_labels)
    assert swapped.top1 == base.top1


def test_better_separated_features_score_no_worse():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 3, 900)
    centers = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]])
    noise = rng.normal(size=(900, 2))
    cfg = ProbeConfig(epochs=8, lr0=0.1, seed=0)
    labels = LabelVector(y, num_classes=3)
    scores = []
    for margin in (1.0, 2.5):  # same noise, larger inter-class margin
        feats = FeatureMatrix(margin * centers[y] + noise)
        clf = probe_fit(feats, labels, cfg)
        scores.append(probe_eval(clf, feats, labels).top1)
    assert scores[1] >= scores[0]


def test_single_class_rejected():
    feats = FeatureMatrix(np.ones((5, 2)))
    labels = LabelVector(np.zeros(5, dtype=int), num_classes=2)
    with pytest.raises(DegenerateInputError):
        probe_fit(feats, labels, ProbeConfig(epochs=1, seed=0))


def test_shape_mismatch_rejected(two_blobs):
    feats, labels = two_blobs
    clf = LinearClassifier(weights=np.zeros((2, 3)), bias=np.zeros(2))
    with pytest.raises(ShapeError):
        probe_eval(clf, feats, labels)


def test_per_class_accuracy_vector(two_blobs):
    feats, labels = two_blobs
    clf = probe_fit(feats, labels, ProbeConfig(epochs=10, lr0=0.1, seed=0))
    result = probe_eval(clf, feats, labels)
    assert result.per_class.shape == (2,)
    assert ((result.per_class >= 0) & (result.per_class <= 1)).all()


def test_estimator_wrapper(two_blobs):
    feats, labels = two_blobs
    probe = LinearProbe(epochs=10, lr0=0.1, seed=0).fit(feats.data, labels.labels)
    assert probe.score(feats.data, labels.labels) == 1.0
