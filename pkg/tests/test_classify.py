
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import knn_reference
from ratingspace.classify import (
    DEFAULT_CLASSIFIER_IDS,
    DistanceKind,
    LabeledPoints,
    SvmModel,
    fit_scale,
    kernel_matrix,
    knn_classify,
    knn_classify_batch,
    knn_distance,
    parse_classifier,
    svm_predict,
    svm_predict_batch,
    svm_train,
)

XOR = LabeledPoints([[0, 0], [1, 1], [0, 1], [1, 0]], [True, True, False, False])


def two_clusters(rng, m=40):
    X = np.vstack([rng.normal(-2, 0.5, (m // 2, 2)), rng.normal(2, 0.5, (m // 2, 2))])
    return LabeledPoints(X, np.arange(m) >= m // 2)


def accuracy(model, data):
    return np.mean(svm_predict_batch(model, data.points) == data.labels)


def kkt_violation(model, data, K):
    y = np.where(data.labels, 1.0, -1.0)
    f = K @ (model.alpha * y) + model.bias
    yf = y * f
    a, C = model.alpha, model.C
    worst = 0.0
    worst = max(worst, np.max(np.where(a <= 0, np.maximum(0, 1 - yf), 0)))
    worst = max(worst, np.max(np.where((a > 0) & (a < C), np.abs(yf - 1), 0)))
    worst = max(worst, np.max(np.where(a >= C, np.maximum(0, yf - 1), 0)))
    return worst


def test_separable_toy(rng):
    data = two_clusters(rng)
    model = svm_train(data, "linear")
    assert accuracy(model, data) == 1.0


def test_xor():
    assert accuracy(svm_train(XOR, "linear"), XOR) <= 0.75
    assert accuracy(svm_train(XOR, "rbf", C=1e4, gamma=1.0), XOR) == 1.0


def test_conflicting_duplicates():
    data = LabeledPoints([[0.0], [0.0], [1.0]], [True, False, True])
    for C in (0.1, 10.0, 1e4):
        assert accuracy(svm_train(data, "rbf", C=C, gamma=1.0), data) < 1.0


def test_two_point_margin_geometry():
    # points at -1 and +1: optimal hyperplane x = 0, decision value equals x
    data = LabeledPoints([[-1.0], [1.0]], [False, True])
    model = svm_train(data, "linear", C=100.0)
    assert model.decision([[0.0]])[0] == pytest.approx(0.0, abs=1e-9)
    assert model.decision([[0.5]])[0] == pytest.approx(0.5, abs=1e-9)
    assert np.allclose(model.alpha, 0.5, atol=1e-9)


def test_single_class_constant_model():
    data = LabeledPoints([[0.0], [1.0]], [True, True])
    with pytest.warns(RuntimeWarning, match="single-class"):
        model = svm_train(data)
    assert svm_predict(model, [5.0]) is True


def test_zero_vector_follows_bias_sign():
    for b in (-0.3, 0.7):
        model = SvmModel("linear", 1.0, 0.1, np.array([1.0]), np.array([[2.0, 1.0]]), b, np.array([1.0]))
        assert svm_predict(model, [0.0, 0.0]) is (b > 0)


def test_standardized_svm_matches_manual_scaling(rng):
    X = rng.normal(size=(30, 3)) * [1, 10, 100]
    data = LabeledPoints(X, X[:, 0] + X[:, 1] / 10 > 0)
    m1 = svm_train(data, "rbf", standardize=True)
    Z = (X - X.mean(0)) / X.std(0)
    m2 = svm_train(LabeledPoints(Z, data.labels), "rbf")
    assert np.allclose(m1.decision(X), m2.decision(Z), atol=1e-12)


@pytest.mark.parametrize("kernel", ["linear", "rbf"])
def test_dual_feasibility_and_kkt(rng, kernel):
    for _ in range(10):
        X = rng.normal(size=(50, 3))
        data = LabeledPoints(X, X[:, 0] + 0.8 * rng.normal(size=50) > 0)
        model = svm_train(data, kernel, C=4.0)
        y = np.where(data.labels, 1.0, -1.0)
        assert np.all(model.alpha >= 0) and np.all(model.alpha <= 4.0)
        assert abs(model.alpha @ y) <= 1e-3 * 4.0
        assert kkt_violation(model, data, kernel_matrix(kernel, X, X)) <= 1e-3


def test_solve_dual_validates_shapes():
    with pytest.raises(ValueError):
        svm_train(XOR, C=0)
    with pytest.raises(ValueError):
        kernel_matrix("poly", np.ones((1, 1)), np.ones((1, 1)))


def test_matches_sklearn_svc(rng):
    svc = pytest.importorskip("sklearn.svm").SVC
    X = rng.normal(size=(80, 4))
    y = X[:, 0] - X[:, 1] + 0.5 * rng.normal(size=80) > 0
    Q = rng.normal(size=(40, 4))
    for kernel in ("linear", "rbf"):
        ours = svm_train(LabeledPoints(X, y), kernel, C=4.0, gamma=0.1)
        ref = svc(kernel=kernel, C=4.0, gamma=0.1, tol=1e-6).fit(X, y)
        fo, fr = ours.decision(Q), ref.decision_function(Q)
        assert np.max(np.abs(fo - fr)) < 1e-2 * max(1.0, np.max(np.abs(fr)))


def test_distance_examples():
    assert knn_distance("euclidean", [1, 2], [1, 2]) == 0.0
    assert knn_distance("cosine", [1, 2], [1, 2]) == pytest.approx(0.0, abs=1e-15)
    assert knn_distance("euclidean", [1, 0], [0, 1]) == pytest.approx(np.sqrt(2))
    assert knn_distance("cosine", [1, 0], [0, 1]) == 1.0
    assert knn_distance("negative_scalar_product", [1, 0], [0, 1]) == 0.0
    assert knn_distance("negative_scalar_product", [2, 0], [2, 0]) == -4.0
    assert knn_distance("standardized_euclidean", [0, 0], [2, 3], scale=np.array([2.0, 3.0])) == pytest.approx(np.sqrt(2))


def test_distance_degenerate_cases():
    with pytest.warns(RuntimeWarning, match="zero vector"):
        assert knn_distance("cosine", [0, 0], [1, 0]) == 2.0
    with pytest.warns(RuntimeWarning, match="zero-variance"):
        assert list(fit_scale(np.array([[1.0, 2.0], [1.0, 4.0]]))) == [1.0, 1.0]
    with pytest.raises(ValueError):
        knn_distance("standardized_euclidean", [0], [1])


def test_knn_examples():
    train = LabeledPoints([[0.0], [1.0], [2.0], [10.0]], [False, True, True, False])
    assert knn_classify(train, "euclidean", 1, [1.0]) is True
    assert knn_classify(train, "euclidean", 3, [1.2]) is True
    with pytest.raises(ValueError):
        knn_classify(train, "euclidean", 2, [0.0])
    with pytest.raises(ValueError):
        knn_classify(train, "euclidean", 5, [0.0])


def test_knn_ties_go_to_lower_index():
    train = LabeledPoints([[1.0], [-1.0]], [True, False])
    assert knn_classify(train, "euclidean", 1, [0.0]) is True
    train = LabeledPoints([[-1.0], [1.0]], [False, True])
    assert knn_classify(train, "euclidean", 1, [0.0]) is False


def _oracle_dist(kind, scale):
    if kind is DistanceKind.EUCLIDEAN:
        return lambda a, b: float(np.sqrt(np.sum((a - b) ** 2)))
    if kind is DistanceKind.STANDARDIZED_EUCLIDEAN:
        return lambda a, b: float(np.sqrt(np.sum(((a - b) / scale) ** 2)))
    if kind is DistanceKind.NEGATIVE_SCALAR_PRODUCT:
        return lambda a, b: -float(a @ b)
    return lambda a, b: 1.0 - float(a @ b) / float(np.linalg.norm(a) * np.linalg.norm(b))


@pytest.mark.parametrize("kind", list(DistanceKind))
def test_knn_matches_full_sort_oracle(rng, kind):
    X = rng.normal(size=(30, 3))
    y = rng.random(30) < 0.5
    Q = rng.normal(size=(25, 3))
    scale = X.std(axis=0)
    dist = _oracle_dist(kind, scale)
    got = knn_classify_batch(LabeledPoints(X, y), kind, 9, Q)
    assert [bool(g) for g in got] == [knn_reference(X, y, q, dist, 9) for q in Q]


def test_knn_one_reproduces_training_labels(rng):
    X = rng.normal(size=(25, 4))
    y = rng.random(25) < 0.5
    for kind in ("euclidean", "standardized_euclidean", "cosine"):
        assert np.array_equal(knn_classify_batch(LabeledPoints(X, y), kind, 1, X), y)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 3, 5]))
def test_property_knn_isometry_invariance(seed, k):
    rng = np.random.default_rng(seed)
    X, Q = rng.normal(size=(15, 3)), rng.normal(size=(6, 3))
    y = rng.random(15) < 0.5
    R, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    t = rng.normal(size=3)
    base = knn_classify_batch(LabeledPoints(X, y), "euclidean", k, Q)
    moved = knn_classify_batch(LabeledPoints(X @ R + t, y), "euclidean", k, Q @ R + t)
    D = np.linalg.norm(Q[:, None] - X[None], axis=2)
    s = np.sort(D, axis=1)
    if np.min(np.diff(s, axis=1)) < 1e-9:
        return  # near-ties can flip under rounding
    assert np.array_equal(base, moved)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100), st.sampled_from(["euclidean", "cosine", "negative_scalar_product"]))
def test_property_knn_scaling_invariance(seed, c, kind):
    rng = np.random.default_rng(seed)
    X, Q = rng.normal(size=(15, 2)), rng.normal(size=(6, 2))
    y = rng.random(15) < 0.5
    from ratingspace.classify import pairwise_distances

    s = np.sort(pairwise_distances(kind, Q, X), axis=1)
    if np.min(np.diff(s, axis=1)) < 1e-9:
        return
    base = knn_classify_batch(LabeledPoints(X, y), kind, 3, Q)
    assert np.array_equal(base, knn_classify_batch(LabeledPoints(c * X, y), kind, 3, c * Q))


def test_parse_classifier():
    assert [parse_classifier(c).id for c in DEFAULT_CLASSIFIER_IDS] == list(DEFAULT_CLASSIFIER_IDS)
    assert len(DEFAULT_CLASSIFIER_IDS) == 14
    spec = parse_classifier("9nn-SEUCL")
    assert spec.k == 9 and spec.distance is DistanceKind.STANDARDIZED_EUCLIDEAN
    assert parse_classifier("SVM-RBF", gamma=0.5).gamma == 0.5
    for bad in ("SVM-poly", "2NN-Eucl", "3NN-manhattan", ""):
        with pytest.raises(ValueError):
            parse_classifier(bad)
