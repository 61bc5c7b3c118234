import numpy as np
import pytest

from clusterfit import FeatureMatrix, LabelVector


def perceptron_separable(X, y, max_iters=10000):
    """Independent separability certificate: run the perceptron on the
    binary toy set and report whether it finds a separating hyperplane."""
    Xb = np.hstack([X, np.ones((len(X), 1))])
    sign = np.where(y == 1, 1.0, -1.0)
    w = np.zeros(Xb.shape[1])
    for _ in range(max_iters):
        margins = sign * (Xb @ w)
        bad = np.flatnonzero(margins <= 0)
        if bad.size == 0:
            return True
        w += sign[bad[0]] * Xb[bad[0]]
    return False


@pytest.fixture
def two_blobs():
    """Linearly separable 2-class blobs with the separability certified
    by an exhaustive perceptron oracle."""
    rng = np.random.default_rng(7)
    X = np.vstack([rng.normal(0, 1, (150, 6)) + 4, rng.normal(0, 1, (150, 6)) - 4])
    y = np.array([0] * 150 + [1] * 150)
    assert perceptron_separable(X, y)
    return FeatureMatrix(X), LabelVector(y, num_classes=2)
