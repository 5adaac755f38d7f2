"""Neighborhood baseline: shrunk Pearson similarities, log distances, metric MDS.

Pairwise matrices are kept in packed (condensed) form: entry ``(i, j)`` with
``i < j`` lives at ``I*i - i*(i+1)/2 + j - i - 1``, the same order as
``scipy.spatial.distance.squareform``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components, shortest_path
from scipy.spatial.distance import pdist, squareform

from .errors import DataError
from .ingest import RatingDataset
from .standardize import CoordinateSpace, principal_axes

log = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1
S_CAP = -1.0 + 1e-6
D_MAX = -math.log((1.0 + S_CAP) / 2.0)
_ZERO_VAR_RTOL = 1e-12


def condensed_index(n: int, i: int, j: int) -> int:
    if i == j:
        raise ValueError("diagonal entries are not stored")
    if i > j:
        i, j = j, i
    return n * i - i * (i + 1) // 2 + j - i - 1


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    n_items: int
    s: np.ndarray  # packed shrunk similarities (0 where missing)
    counts: np.ndarray  # packed co-rater counts
    missing: np.ndarray  # packed bool, correlation undefined
    diag_counts: np.ndarray
    lam: float

    @property
    def diag(self) -> np.ndarray:
        return shrink(1.0, self.diag_counts, self.lam)

    def get(self, i: int, j: int) -> float | None:
        if i == j:
            return float(self.diag[i])
        k = condensed_index(self.n_items, i, j)
        return None if self.missing[k] else float(self.s[k])

    def count(self, i: int, j: int) -> int:
        if i == j:
            return int(self.diag_counts[i])
        return int(self.counts[condensed_index(self.n_items, i, j)])


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    n_items: int
    d: np.ndarray  # packed distances (0 where missing)
    missing: np.ndarray
    meta: dict = field(default_factory=dict)

    def get(self, i: int, j: int) -> float | None:
        if i == j:
            return 0.0
        k = condensed_index(self.n_items, i, j)
        return None if self.missing[k] else float(self.d[k])

    def square(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``(distances, weights)``; weight 0 marks missing pairs."""
        return squareform(self.d), squareform((~self.missing).astype(float))

    @property
    def missing_fraction(self) -> float:
        return float(self.missing.mean()) if self.missing.size else 0.0


# -- scalar operations -------------------------------------------------------


def pearson(ds: RatingDataset, i: int, j: int) -> tuple[float | None, int]:
    """Pearson correlation of items ``i`` and ``j`` over their co-raters.

    Means are taken over the co-raters only.  Returns ``(None, n)`` when
    there are no co-raters or either centered vector is constant.
    """
    if not (0 <= i < ds.n_items and 0 <= j < ds.n_items):
        raise IndexError("item index out of range")
    R = ds.to_sparse()
    ui, ri = R.indices[R.indptr[i] : R.indptr[i + 1]], R.data[R.indptr[i] : R.indptr[i + 1]]
    uj, rj = R.indices[R.indptr[j] : R.indptr[j + 1]], R.data[R.indptr[j] : R.indptr[j + 1]]
    common, ki, kj = np.intersect1d(ui, uj, assume_unique=True, return_indices=True)
    n = len(common)
    if n == 0:
        return None, 0
    x, y = ri[ki], rj[kj]
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        return None, n
    rho = float(xc @ yc) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, rho)), n


def shrink(rho, n, lam: float):
    """``n / (n + lam) * rho``; zero co-raters give zero."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    n = np.asarray(n, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        factor = np.where(n > 0, n / (n + lam), 0.0)
    out = factor * rho
    return float(out) if np.ndim(out) == 0 else out


def to_distance(s):
    """``-ln((1 + s) / 2)``, with similarities below ``S_CAP`` capped at ``D_MAX``."""
    s = np.asarray(s, dtype=float)
    if np.any(s > 1.0) or np.any(s < -1.0):
        raise ValueError("similarity outside [-1, 1]")
    out = -np.log((1.0 + np.maximum(s, S_CAP)) / 2.0)
    out = np.where(s == 1.0, 0.0, out)
    return float(out) if out.ndim == 0 else out


# -- pairwise construction ---------------------------------------------------


def _pearson_block(X, M, X2, rows: slice):
    """Correlations of items in ``rows`` against all items via sufficient sums."""
    Xb, Mb, X2b = X[rows], M[rows], X2[rows]
    n = (Mb @ M.T).toarray()
    sx = (Xb @ M.T).toarray()
    sy = (Mb @ X.T).toarray()
    sxx = (X2b @ M.T).toarray()
    syy = (Mb @ X2.T).toarray()
    sxy = (Xb @ X.T).toarray()
    num = n * sxy - sx * sy
    vx = n * sxx - sx * sx
    vy = n * syy - sy * sy
    undefined = (n == 0) | (vx <= _ZERO_VAR_RTOL * n * sxx) | (vy <= _ZERO_VAR_RTOL * n * syy)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = num / (np.sqrt(np.where(undefined, 1.0, vx)) * np.sqrt(np.where(undefined, 1.0, vy)))
    rho = np.clip(np.where(undefined, 0.0, rho), -1.0, 1.0)
    return rho, n.astype(np.int64), undefined


def build_similarity_matrix(ds: RatingDataset, lam: float = 20.0, block: int = 512) -> SimilarityMatrix:
    if ds.n_items == 0:
        raise ValueError("dataset has no items")
    R = ds.to_sparse()
    M = R.copy()
    M.data = np.ones_like(M.data)
    X2 = R.multiply(R).tocsr()
    I = ds.n_items
    size = I * (I - 1) // 2
    s = np.zeros(size)
    counts = np.zeros(size, dtype=np.int64)
    missing = np.zeros(size, dtype=bool)
    for lo in range(0, I, block):
        hi = min(lo + block, I)
        rho, n, undef = _pearson_block(R, M, X2, slice(lo, hi))
        for i in range(lo, hi):
            j0 = i + 1
            if j0 >= I:
                continue
            k0 = condensed_index(I, i, j0)
            k1 = k0 + (I - j0)
            row = i - lo
            counts[k0:k1] = n[row, j0:]
            missing[k0:k1] = undef[row, j0:]
            s[k0:k1] = np.where(undef[row, j0:], 0.0, shrink(rho[row, j0:], n[row, j0:], lam))
    return SimilarityMatrix(I, s, counts, missing, ds.item_counts().astype(np.int64), float(lam))


def build_distance_matrix(ds: RatingDataset, lam: float = 20.0, block: int = 512) -> DistanceMatrix:
    """Shrunk Pearson similarities turned into log distances; undefined pairs stay missing."""
    sim = build_similarity_matrix(ds, lam, block)
    d = np.where(sim.missing, 0.0, to_distance(sim.s))
    dm = DistanceMatrix(sim.n_items, d, sim.missing.copy(), {"lambda": float(lam)})
    log.info("distance matrix: %d items, %.1f%% of pairs missing", dm.n_items, 100 * dm.missing_fraction)
    return dm


# -- metric MDS --------------------------------------------------------------


@dataclass(frozen=True)
class MdsConfig:
    max_iter: int = 500
    tolerance: float = 1e-6
    restarts: int = 1
    seed: int = 0
    init_scale: float | None = None  # defaults to the RMS of the defined distances

    def validate(self) -> list[str]:
        problems = []
        if self.max_iter < 1:
            problems.append("max_iter must be >= 1")
        if not self.tolerance > 0:
            problems.append("tolerance must be > 0")
        if self.restarts < 1:
            problems.append("restarts must be >= 1")
        return problems


def stress(X: np.ndarray, delta: np.ndarray, weights: np.ndarray) -> float:
    """Raw weighted stress over pairs ``i < j``."""
    D = squareform(pdist(X))
    diff = (delta - D) * weights
    return float(np.sum(np.triu(diff * (delta - D), 1)))


def _guttman_solver(W: np.ndarray):
    I = W.shape[0]
    if np.all(W[~np.eye(I, dtype=bool)] == 1.0):
        return lambda Y: Y / I
    V = np.diag(W.sum(axis=1)) - W
    J = np.full((I, I), 1.0 / I)
    Vplus = np.linalg.inv(V + J) - J
    return lambda Y: Vplus @ Y


def _smacof(delta, W, X, solve, max_iter, tol):
    wd = W * delta
    total = float(np.sum(np.triu(wd * delta, 1)))
    floor = 1e-15 * max(total, 1e-300)
    D = squareform(pdist(X))
    cur = float(np.sum(np.triu(W * (delta - D) ** 2, 1)))
    trace = [cur]
    converged = False
    for _ in range(max_iter):
        if cur <= floor:
            converged = True
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            Bm = np.where(D > 0, -wd / D, 0.0)
        np.fill_diagonal(Bm, 0.0)
        np.fill_diagonal(Bm, -Bm.sum(axis=1))
        X_new = solve(Bm @ X)
        D_new = squareform(pdist(X_new))
        new = float(np.sum(np.triu(W * (delta - D_new) ** 2, 1)))
        if new > cur:
            converged = True
            break
        rel = (cur - new) / cur if cur > 0 else 0.0
        X, D, cur = X_new, D_new, new
        trace.append(cur)
        if rel < tol:
            converged = True
            break
    return X, cur, trace, converged


def classical_start(delta: np.ndarray, W: np.ndarray, d: int) -> np.ndarray:
    """Torgerson scaling of ``delta``, missing pairs filled by graph shortest paths."""
    I = delta.shape[0]
    if I < 2:
        return np.zeros((I, d))
    full = shortest_path(sparse.csr_matrix(np.where(W > 0, np.maximum(delta, 1e-300), 0.0)), directed=False)
    full = np.where(W > 0, delta, full)
    np.fill_diagonal(full, 0.0)
    J = np.eye(I) - 1.0 / I
    G = -0.5 * J @ (full**2) @ J
    vals, vecs = np.linalg.eigh(G)
    top = np.argsort(vals)[::-1][:d]
    X = vecs[:, top] * np.sqrt(np.maximum(vals[top], 0.0))
    if X.shape[1] < d:
        X = np.hstack([X, np.zeros((I, d - X.shape[1]))])
    return X


def mds_embed(dm: DistanceMatrix, d: int, cfg: MdsConfig | None = None, item_ids=None) -> CoordinateSpace:
    """Metric MDS by stress majorization; missing pairs get weight zero.

    The first start is classical scaling, further restarts are random.

    The result is centered and rotated onto its principal axes, in
    decreasing-variance order.
    """
    cfg = cfg or MdsConfig()
    problems = cfg.validate()
    if problems:
        raise ValueError("; ".join(problems))
    if d < 1:
        raise ValueError("d must be >= 1")
    delta, W = dm.square()
    I = dm.n_items
    if I > 1:
        ncomp, _ = connected_components(sparse.csr_matrix(W), directed=False)
        if ncomp > 1:
            raise DataError(f"distance structure splits into {ncomp} disconnected groups")
    solve = _guttman_solver(W) if I > 1 else (lambda Y: Y)
    defined = delta[W > 0]
    scale = cfg.init_scale or (float(np.sqrt(np.mean(defined**2))) if defined.size else 1.0) or 1.0
    best = None
    for k, child in enumerate(np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)):
        if k == 0:
            X0 = classical_start(delta, W, d)
            # break exact ties so every point has a defined gradient
            X0 = X0 + np.random.default_rng(child).normal(0.0, 1e-9 * scale, (I, d))
        else:
            X0 = np.random.default_rng(child).normal(0.0, scale / math.sqrt(2 * d), (I, d))
        X, value, trace, converged = _smacof(delta, W, X0, solve, cfg.max_iter, cfg.tolerance)
        if not converged:
            warnings.warn(f"MDS restart {k} did not converge in {cfg.max_iter} iterations", RuntimeWarning, stacklevel=2)
        if best is None or value < best[1]:
            best = (X, value, trace)
    X, value, trace = best
    Y = principal_axes(X)
    scales = np.einsum("ij,ij->j", Y, Y)
    prov = {"extractor": "MDS", "d": d, "stress": value, "iterations": len(trace) - 1, **dm.meta}
    return CoordinateSpace(Y, scales, prov, item_ids)


# -- files -------------------------------------------------------------------


def save_distance_matrix(dm: DistanceMatrix, path: str | os.PathLike, meta: dict | None = None):
    header = {
        "format": "ratingspace.distances",
        "version": SNAPSHOT_VERSION,
        "items": dm.n_items,
        "layout": "packed-upper",
        "meta": dm.meta,
        **(meta or {}),
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), d=dm.d, missing=np.packbits(dm.missing))


def load_distance_matrix(path: str | os.PathLike) -> DistanceMatrix:
    with np.load(path, allow_pickle=False) as z:
        h = json.loads(str(z["header"]))
        if h.get("format") != "ratingspace.distances" or h["version"] > SNAPSHOT_VERSION:
            raise ValueError(f"{path} is not a supported distance snapshot")
        d = z["d"]
        missing = np.unpackbits(z["missing"], count=len(d)).astype(bool)
        return DistanceMatrix(h["items"], d, missing, h.get("meta", {}))


def export_distance_csv(dm: DistanceMatrix, path: str | os.PathLike, item_ids=None):
    ids = item_ids if item_ids is not None else [str(i) for i in range(dm.n_items)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_i", "item_j", "distance"])
        k = 0
        for i in range(dm.n_items):
            for j in range(i + 1, dm.n_items):
                w.writerow([ids[i], ids[j], "NA" if dm.missing[k] else repr(float(dm.d[k]))])
                k += 1
