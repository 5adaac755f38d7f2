"""Binary genre classifiers: soft-margin SVMs and kNN under four distances."""

from __future__ import annotations

import enum
import logging
import re
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

log = logging.getLogger(__name__)

DEFAULT_C = 4.0
DEFAULT_GAMMA = 0.1
KKT_TOL = 1e-3
_TAU = 1e-12


@dataclass(frozen=True, eq=False)
class LabeledPoints:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        y = np.asarray(self.labels, dtype=bool).ravel()
        if X.shape[0] < 1 or X.shape[0] != y.shape[0]:
            raise ValueError(f"need m >= 1 points with one label each, got {X.shape[0]} and {y.shape[0]}")
        if not np.isfinite(X).all():
            raise ValueError("coordinates must be finite")
        object.__setattr__(self, "points", X)
        object.__setattr__(self, "labels", y)

    @property
    def m(self) -> int:
        return len(self.labels)


# -- SVM ---------------------------------------------------------------------


def kernel_matrix(kernel: str, X: np.ndarray, Y: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    if kernel == "linear":
        return X @ Y.T
    if kernel == "rbf":
        return np.exp(-gamma * cdist(X, Y, "sqeuclidean"))
    raise ValueError(f"unknown kernel {kernel!r}")


@dataclass(frozen=True, eq=False)
class SvmModel:
    kernel: str
    C: float
    gamma: float
    coef: np.ndarray  # alpha_t * y_t of the support points
    support: np.ndarray
    bias: float
    alpha: np.ndarray  # full dual vector, training order
    constant: bool | None = None  # set for degenerate single-class models
    center: np.ndarray | None = None
    scale: np.ndarray | None = None
    iterations: int = 0

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.center is not None:
            X = (X - self.center) / self.scale
        return X

    def decision(self, X: np.ndarray) -> np.ndarray:
        X = self.transform(X)
        if self.constant is not None:
            return np.full(X.shape[0], 1.0 if self.constant else -1.0)
        if len(self.coef) == 0:
            return np.full(X.shape[0], self.bias)
        return kernel_matrix(self.kernel, X, self.support, self.gamma) @ self.coef + self.bias


def solve_dual(Q: np.ndarray, y: np.ndarray, C: float, tol: float = KKT_TOL, max_iter: int | None = None):
    """SMO on ``min 1/2 a'Qa - sum(a)`` s.t. ``0 <= a <= C``, ``y'a = 0``.

    Working pairs are chosen by maximal violation with second-order
    selection of the partner.  Returns ``(alpha, rho, iterations)``; the
    decision function is ``sum_t alpha_t y_t K(x_t, x) - rho``.
    """
    n = len(y)
    max_iter = max_iter or max(100_000, 100 * n)
    alpha = np.zeros(n)
    G = -np.ones(n)
    diagQ = np.diag(Q).copy()
    it = 0
    pos = y > 0
    while it < max_iter:
        below, above = alpha < C, alpha > 0
        up = np.where(pos, below, above)
        low = np.where(pos, above, below)
        myG = -y * G
        if not up.any() or not low.any():
            break
        cand = np.where(up, myG, -np.inf)
        i = int(np.argmax(cand))
        gmax = cand[i]
        gmin = np.min(np.where(low, myG, np.inf))
        if gmax - gmin < tol:
            break
        b = gmax - myG
        viol = low & (b > 0)
        quad = diagQ[i] + diagQ - 2.0 * y[i] * y * Q[i]
        quad = np.where(quad > 0, quad, _TAU)
        score = np.where(viol, -(b * b) / quad, np.inf)
        j = int(np.argmin(score))
        it += 1

        ai, aj = alpha[i], alpha[j]
        Qi, Qj = Q[i], Q[j]
        if y[i] != y[j]:
            q = diagQ[i] + diagQ[j] + 2.0 * Qi[j]
            delta = (-G[i] - G[j]) / max(q, _TAU)
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > 0:
                if ni > C:
                    ni, nj = C, C - diff
            elif nj > C:
                nj, ni = C, C + diff
        else:
            q = diagQ[i] + diagQ[j] - 2.0 * Qi[j]
            delta = (G[i] - G[j]) / max(q, _TAU)
            total = ai + aj
            ni, nj = ai - delta, aj + delta
            if total > C:
                if ni > C:
                    ni, nj = C, total - C
            elif nj < 0:
                nj, ni = 0.0, total
            if total > C:
                if nj > C:
                    nj, ni = C, total - C
            elif ni < 0:
                ni, nj = 0.0, total
        G += Qi * (ni - ai) + Qj * (nj - aj)
        alpha[i], alpha[j] = ni, nj
    else:
        warnings.warn(f"SMO stopped after {max_iter} iterations without reaching tolerance", RuntimeWarning, stacklevel=2)

    yG = y * G
    at_upper, at_lower = alpha >= C, alpha <= 0
    free = ~(at_upper | at_lower)
    if free.any():
        rho = float(yG[free].mean())
    else:
        ub_mask = (at_upper & ~pos) | (at_lower & pos)
        lb_mask = (at_upper & pos) | (at_lower & ~pos)
        ub = yG[ub_mask].min() if ub_mask.any() else np.inf
        lb = yG[lb_mask].max() if lb_mask.any() else -np.inf
        rho = float((ub + lb) / 2) if np.isfinite(ub) and np.isfinite(lb) else float(ub if np.isfinite(ub) else lb)
    return alpha, rho, it


def svm_train(
    data: LabeledPoints,
    kernel: str = "linear",
    C: float = DEFAULT_C,
    gamma: float = DEFAULT_GAMMA,
    standardize: bool = False,
    K: np.ndarray | None = None,
) -> SvmModel:
    """Soft-margin SVM.  ``K`` may pass a precomputed training kernel."""
    if not C > 0:
        raise ValueError("C must be positive")
    X, labels = data.points, data.labels
    center = scale = None
    if standardize:
        center = X.mean(axis=0)
        scale = X.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        X = (X - center) / scale
        K = None
    if labels.all() or not labels.any():
        warnings.warn("single-class training data; returning a constant classifier", RuntimeWarning, stacklevel=2)
        return SvmModel(kernel, C, gamma, np.empty(0), X[:0], 0.0, np.zeros(len(labels)), bool(labels[0]), center, scale)
    y = np.where(labels, 1.0, -1.0)
    if K is None:
        K = kernel_matrix(kernel, X, X, gamma)
    Q = (y[:, None] * y[None, :]) * K
    alpha, rho, iters = solve_dual(Q, y, C)
    sv = alpha > 0
    return SvmModel(kernel, C, gamma, alpha[sv] * y[sv], X[sv], -rho, alpha, None, center, scale, iters)


def svm_predict(m: SvmModel, x) -> bool:
    """Positive iff the decision value is strictly above zero."""
    return bool(m.decision(np.asarray(x, dtype=float).reshape(1, -1))[0] > 0)


def svm_predict_batch(m: SvmModel, X: np.ndarray) -> np.ndarray:
    return m.decision(X) > 0


# -- kNN ---------------------------------------------------------------------


class DistanceKind(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    STANDARDIZED_EUCLIDEAN = "standardized_euclidean"
    NEGATIVE_SCALAR_PRODUCT = "negative_scalar_product"
    COSINE = "cosine"

    @property
    def short(self) -> str:
        return _SHORT[self]


_SHORT = {
    DistanceKind.EUCLIDEAN: "Eucl",
    DistanceKind.STANDARDIZED_EUCLIDEAN: "sEucl",
    DistanceKind.NEGATIVE_SCALAR_PRODUCT: "scal",
    DistanceKind.COSINE: "cos",
}
_FROM_SHORT = {v.lower(): k for k, v in _SHORT.items()}


def fit_scale(points: np.ndarray) -> np.ndarray:
    """Per-dimension standard deviation of the training points; zeros become 1."""
    sigma = np.asarray(points, dtype=float).std(axis=0)
    if np.any(sigma == 0):
        warnings.warn("zero-variance dimension in standardized Euclidean distance; using scale 1", RuntimeWarning, stacklevel=2)
        sigma = np.where(sigma == 0, 1.0, sigma)
    return sigma


def knn_distance(kind: DistanceKind | str, x, y, scale: np.ndarray | None = None) -> float:
    return float(pairwise_distances(kind, np.atleast_2d(x), np.atleast_2d(y), scale)[0, 0])


def pairwise_distances(kind: DistanceKind | str, Q: np.ndarray, T: np.ndarray, scale: np.ndarray | None = None) -> np.ndarray:
    """Distances from each query row of ``Q`` to each training row of ``T``."""
    kind = DistanceKind(kind)
    Q = np.asarray(Q, dtype=float)
    T = np.asarray(T, dtype=float)
    if kind is DistanceKind.EUCLIDEAN:
        return cdist(Q, T)
    if kind is DistanceKind.STANDARDIZED_EUCLIDEAN:
        if scale is None:
            raise ValueError("standardized Euclidean distance needs a scale vector")
        return cdist(Q / scale, T / scale)
    if kind is DistanceKind.NEGATIVE_SCALAR_PRODUCT:
        return -(Q @ T.T)
    nq = np.linalg.norm(Q, axis=1)
    nt = np.linalg.norm(T, axis=1)
    zero = (nq[:, None] == 0) | (nt[None, :] == 0)
    if zero.any():
        warnings.warn("zero vector under cosine distance; using the maximum distance 2", RuntimeWarning, stacklevel=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = (Q @ T.T) / (nq[:, None] * nt[None, :])
    return np.where(zero, 2.0, 1.0 - np.clip(cos, -1.0, 1.0))


def neighbor_order(dist: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest training points per row; ties to the lower index."""
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def knn_vote(order: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    return labels[order[:, :k]].sum(axis=1) * 2 > k


def knn_classify(train: LabeledPoints, kind: DistanceKind | str, k: int, x) -> bool:
    return bool(knn_classify_batch(train, kind, k, np.atleast_2d(x))[0])


def knn_classify_batch(train: LabeledPoints, kind: DistanceKind | str, k: int, X: np.ndarray) -> np.ndarray:
    if k < 1 or k % 2 == 0:
        raise ValueError("k must be a positive odd number")
    if k > train.m:
        raise ValueError(f"k={k} exceeds the {train.m} training points")
    kind = DistanceKind(kind)
    scale = fit_scale(train.points) if kind is DistanceKind.STANDARDIZED_EUCLIDEAN else None
    order = neighbor_order(pairwise_distances(kind, X, train.points, scale), k)
    return knn_vote(order, train.labels, k)


# -- classifier specs --------------------------------------------------------


@dataclass(frozen=True)
class ClassifierSpec:
    id: str
    family: str  # "svm" or "knn"
    kernel: str | None = None
    C: float = DEFAULT_C
    gamma: float = DEFAULT_GAMMA
    k: int | None = None
    distance: DistanceKind | None = None
    standardize: bool = False


_KNN_RE = re.compile(r"^(\d+)nn-(\w+)$", re.IGNORECASE)


def parse_classifier(cid: str, C: float = DEFAULT_C, gamma: float = DEFAULT_GAMMA, standardize: bool = False) -> ClassifierSpec:
    """Parse ids such as ``SVM-lin``, ``SVM-RBF`` or ``9NN-cos``."""
    key = cid.strip().lower()
    if key == "svm-lin":
        return ClassifierSpec("SVM-lin", "svm", "linear", C, gamma, standardize=standardize)
    if key == "svm-rbf":
        return ClassifierSpec("SVM-RBF", "svm", "rbf", C, gamma, standardize=standardize)
    m = _KNN_RE.match(key)
    if m and m.group(2) in _FROM_SHORT:
        k = int(m.group(1))
        if k < 1 or k % 2 == 0:
            raise ValueError(f"classifier {cid!r}: k must be odd")
        kind = _FROM_SHORT[m.group(2)]
        return ClassifierSpec(f"{k}NN-{kind.short}", "knn", k=k, distance=kind)
    raise ValueError(f"unknown classifier id {cid!r}")


DEFAULT_CLASSIFIER_IDS = (
    "SVM-lin",
    "SVM-RBF",
    *(f"{k}NN-{s}" for s in ("Eucl", "sEucl", "scal", "cos") for k in (1, 3, 9)),
)
