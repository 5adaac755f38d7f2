"""Factor models: regularized SVD, delta-SVD and non-negative factorization.

All three minimize the squared error over the observed ratings plus a ridge
penalty that is summed per observation, so an item rated ``c`` times pays
``c * lam * |a_i|^2``.  Training is full-batch gradient descent where each
coordinate's step is divided by its diagonal curvature, with step halving
whenever the objective would increase.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import NumericalError
from .ingest import RatingDataset

log = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1
_CHUNK = 1 << 17
_TINY = 1e-12


class ModelKind(str, enum.Enum):
    SVD = "SVD"
    DELTA_SVD = "DELTA_SVD"
    NNMF = "NNMF"

    @classmethod
    def parse(cls, value: "str | ModelKind") -> "ModelKind":
        if isinstance(value, cls):
            return value
        key = str(value).upper().replace("-", "_").replace("Δ", "DELTA_").replace("DELTASVD", "DELTA_SVD")
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown model kind {value!r}") from None


@dataclass(frozen=True)
class TrainConfig:
    d: int = 10
    lam: float = 0.04
    learning_rate: float = 1.0
    max_epochs: int = 300
    tolerance: float = 1e-5
    patience: int = 3
    restarts: int = 3
    seed: int = 0
    init_scale: float | None = None  # defaults to 0.1 / sqrt(d)
    bias_penalty: str = "squared"  # "linear" reproduces the unsquared delta penalty

    def validate(self) -> list[str]:
        problems = []
        if not isinstance(self.d, (int, np.integer)) or self.d < 1:
            problems.append("d must be a positive integer")
        if not self.lam >= 0:
            problems.append("lambda must be >= 0")
        if not self.learning_rate > 0:
            problems.append("learning_rate must be > 0")
        if self.max_epochs < 1:
            problems.append("max_epochs must be >= 1")
        if not self.tolerance > 0:
            problems.append("tolerance must be > 0")
        if self.patience < 1:
            problems.append("patience must be >= 1")
        if self.restarts < 1:
            problems.append("restarts must be >= 1")
        if self.init_scale is not None and not self.init_scale > 0:
            problems.append("init_scale must be > 0")
        if self.bias_penalty not in ("squared", "linear"):
            problems.append("bias_penalty must be 'squared' or 'linear'")
        return problems

    @property
    def scale(self) -> float:
        return self.init_scale if self.init_scale is not None else 0.1 / math.sqrt(self.d)


@dataclass(frozen=True, eq=False)
class Factorization:
    """Trained model state: ``A`` is I x d, ``B`` is d x U."""

    A: np.ndarray
    B: np.ndarray
    kind: ModelKind
    lam: float
    mu: float | None = None
    item_bias: np.ndarray | None = None
    user_bias: np.ndarray | None = None
    bias_penalty: str = "squared"
    seed: int | None = None
    history: tuple = field(default=(), repr=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind.parse(self.kind))
        for name in ("A", "B", "item_bias", "user_bias"):
            v = getattr(self, name)
            if v is not None:
                v = np.array(v, dtype=np.float64)
                v.setflags(write=False)
                object.__setattr__(self, name, v)
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[0]:
            raise ValueError(f"incompatible factor shapes {self.A.shape} and {self.B.shape}")
        if self.kind is ModelKind.DELTA_SVD:
            if self.mu is None:
                raise ValueError("DELTA_SVD needs mu")
            if self.item_bias is None:
                object.__setattr__(self, "item_bias", np.zeros(self.n_items))
            if self.user_bias is None:
                object.__setattr__(self, "user_bias", np.zeros(self.n_users))

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def n_items(self) -> int:
        return self.A.shape[0]

    @property
    def n_users(self) -> int:
        return self.B.shape[1]

    @property
    def has_bias(self) -> bool:
        return self.kind is ModelKind.DELTA_SVD


@dataclass
class Gradient:
    A: np.ndarray
    B: np.ndarray
    item_bias: np.ndarray | None = None
    user_bias: np.ndarray | None = None

    def flat(self) -> np.ndarray:
        parts = [self.A.ravel(), self.B.ravel()]
        if self.item_bias is not None:
            parts += [self.item_bias, self.user_bias]
        return np.concatenate(parts)


def _check_dims(ds: RatingDataset, f: Factorization):
    if f.n_items != ds.n_items or f.n_users != ds.n_users:
        raise ValueError(
            f"factorization is {f.n_items}x{f.n_users} but dataset has {ds.n_items} items, {ds.n_users} users"
        )


def predict(f: Factorization, item: int, user: int) -> float:
    if not (0 <= item < f.n_items and 0 <= user < f.n_users):
        raise IndexError(f"pair ({item}, {user}) out of range")
    value = float(f.A[item] @ f.B[:, user])
    if f.has_bias:
        value += f.mu + f.item_bias[item] + f.user_bias[user]
    return value


def predict_observed(f: Factorization, ds: RatingDataset) -> np.ndarray:
    """Predictions for every observed pair of ``ds``, in rating order."""
    _check_dims(ds, f)
    out = np.empty(ds.n)
    Bt = f.B.T
    for lo in range(0, ds.n, _CHUNK):
        hi = min(lo + _CHUNK, ds.n)
        it, us = ds.item_idx[lo:hi], ds.user_idx[lo:hi]
        out[lo:hi] = np.einsum("ij,ij->i", f.A[it], Bt[us])
    if f.has_bias:
        out += f.mu + f.item_bias[ds.item_idx] + f.user_bias[ds.user_idx]
    return out


def sse(ds: RatingDataset, f: Factorization) -> float:
    r = ds.values - predict_observed(f, ds)
    return float(r @ r)


def _penalty(ds: RatingDataset, f: Factorization) -> float:
    ci, cu = ds.item_counts(), ds.user_counts()
    total = ci @ np.einsum("ij,ij->i", f.A, f.A) + cu @ np.einsum("ij,ij->j", f.B, f.B)
    if f.has_bias:
        if f.bias_penalty == "squared":
            total += ci @ f.item_bias**2 + cu @ f.user_bias**2
        else:
            total += ci @ f.item_bias + cu @ f.user_bias
    return float(f.lam * total)


def objective(ds: RatingDataset, f: Factorization) -> float:
    return sse(ds, f) + _penalty(ds, f)


def _indicator(ds: RatingDataset) -> sparse.csr_matrix:
    # ratings are sorted by (item, user), so csr data order == rating order
    indptr = np.concatenate([[0], np.cumsum(ds.item_counts())])
    return sparse.csr_matrix(
        (np.ones(ds.n), ds.user_idx, indptr), shape=(ds.n_items, ds.n_users), copy=False
    )


def gradient(ds: RatingDataset, f: Factorization, shards: int = 1) -> Gradient:
    """Analytic gradient of :func:`objective` with respect to the free parameters.

    ``mu`` is a constant and has no component.  With ``shards > 1`` the
    residual sums are accumulated per contiguous rating shard and reduced in
    shard order.
    """
    _check_dims(ds, f)
    resid = ds.values - predict_observed(f, ds)
    ci, cu = ds.item_counts().astype(float), ds.user_counts().astype(float)
    gA = np.zeros_like(f.A)
    gBt = np.zeros((f.n_users, f.d))
    gi = np.zeros(f.n_items) if f.has_bias else None
    gu = np.zeros(f.n_users) if f.has_bias else None
    bounds = np.linspace(0, ds.n, max(1, shards) + 1).astype(int)
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        E = sparse.csr_matrix(
            (resid[lo:hi], (ds.item_idx[lo:hi], ds.user_idx[lo:hi])), shape=(f.n_items, f.n_users)
        )
        gA -= 2.0 * (E @ f.B.T)
        gBt -= 2.0 * (E.T @ f.A)
        if f.has_bias:
            gi -= 2.0 * np.asarray(E.sum(axis=1)).ravel()
            gu -= 2.0 * np.asarray(E.sum(axis=0)).ravel()
    gA += 2.0 * f.lam * ci[:, None] * f.A
    gBt += 2.0 * f.lam * cu[:, None] * f.B.T
    if f.has_bias:
        if f.bias_penalty == "squared":
            gi += 2.0 * f.lam * ci * f.item_bias
            gu += 2.0 * f.lam * cu * f.user_bias
        else:
            gi += f.lam * ci
            gu += f.lam * cu
    return Gradient(gA, np.ascontiguousarray(gBt.T), gi, gu)


# -- training ----------------------------------------------------------------


class _Problem:
    """Cached sparse structure for repeated objective/gradient evaluation."""

    def __init__(self, ds: RatingDataset, kind: ModelKind, lam: float, bias_penalty: str):
        self.ds = ds
        self.kind = kind
        self.lam = lam
        self.bias_penalty = bias_penalty
        self.M = _indicator(ds)
        self.MT = self.M.T.tocsr()
        self.ci = ds.item_counts().astype(float)
        self.cu = ds.user_counts().astype(float)
        self.mu = ds.mean() if kind is ModelKind.DELTA_SVD else None

    def residuals(self, A, Bt, bi, bu) -> np.ndarray:
        ds = self.ds
        pred = np.empty(ds.n)
        for lo in range(0, ds.n, _CHUNK):
            hi = min(lo + _CHUNK, ds.n)
            pred[lo:hi] = np.einsum("ij,ij->i", A[ds.item_idx[lo:hi]], Bt[ds.user_idx[lo:hi]])
        if bi is not None:
            pred += self.mu + bi[ds.item_idx] + bu[ds.user_idx]
        return ds.values - pred

    def evaluate(self, A, Bt, bi, bu) -> tuple[float, float, np.ndarray]:
        r = self.residuals(A, Bt, bi, bu)
        err = float(r @ r)
        pen = self.ci @ np.einsum("ij,ij->i", A, A) + self.cu @ np.einsum("ij,ij->i", Bt, Bt)
        if bi is not None:
            if self.bias_penalty == "squared":
                pen += self.ci @ bi**2 + self.cu @ bu**2
            else:
                pen += self.ci @ bi + self.cu @ bu
        return err + self.lam * float(pen), err, r

    def scaled_steps(self, A, Bt, bi, bu, r):
        """Gradient divided by the diagonal of the Gauss-Newton curvature."""
        E = self.M.copy()
        E.data = r
        lam = self.lam
        gA = -(E @ Bt) + lam * self.ci[:, None] * A
        gBt = -(E.T @ A) + lam * self.cu[:, None] * Bt
        hA = self.M @ (Bt * Bt) + lam * self.ci[:, None]
        hBt = self.MT @ (A * A) + lam * self.cu[:, None]
        steps = [gA / (hA + _TINY), gBt / (hBt + _TINY)]
        if bi is not None:
            ri = np.asarray(E.sum(axis=1)).ravel()
            ru = np.asarray(E.sum(axis=0)).ravel()
            if self.bias_penalty == "squared":
                gi, gu = -ri + lam * self.ci * bi, -ru + lam * self.cu * bu
                hi, hu = self.ci * (1 + lam), self.cu * (1 + lam)
            else:
                gi, gu = -ri + 0.5 * lam * self.ci, -ru + 0.5 * lam * self.cu
                hi, hu = self.ci, self.cu
            steps += [gi / (hi + _TINY), gu / (hu + _TINY)]
        else:
            steps += [None, None]
        return steps


def _init_params(rng: np.random.Generator, problem: _Problem, cfg: TrainConfig):
    I, U, d = problem.ds.n_items, problem.ds.n_users, cfg.d
    s = cfg.scale
    if problem.kind is ModelKind.NNMF:
        # uniform on (0, s]
        A = s * (1.0 - rng.random((I, d)))
        Bt = s * (1.0 - rng.random((U, d)))
    else:
        A = rng.normal(0.0, s, (I, d))
        Bt = rng.normal(0.0, s, (U, d))
    if problem.kind is ModelKind.DELTA_SVD:
        return A, Bt, np.zeros(I), np.zeros(U)
    return A, Bt, None, None


def _run(problem: _Problem, cfg: TrainConfig, rng: np.random.Generator):
    params = list(_init_params(rng, problem, cfg))
    nonneg = problem.kind is ModelKind.NNMF
    obj, err, r = problem.evaluate(*params)
    if not math.isfinite(obj):
        raise NumericalError("initial objective is not finite")
    history = [(0, obj, err, 0.0)]
    eta = cfg.learning_rate
    streak = 0
    for epoch in range(1, cfg.max_epochs + 1):
        steps = problem.scaled_steps(*params, r)
        while True:
            trial = [None if p is None else p - eta * s for p, s in zip(params, steps)]
            if nonneg:
                np.maximum(trial[0], 0.0, out=trial[0])
                np.maximum(trial[1], 0.0, out=trial[1])
            t_obj, t_err, t_r = problem.evaluate(*trial)
            if not math.isfinite(t_obj) and eta > cfg.learning_rate * 1e-3:
                eta *= 0.5
                continue
            if not math.isfinite(t_obj):
                raise NumericalError(f"objective diverged at epoch {epoch}")
            if t_obj <= obj:
                break
            eta *= 0.5
            if eta < 1e-10 * cfg.learning_rate:
                trial = None
                break
        if trial is None:
            log.debug("no descent step found at epoch %d; stopping", epoch)
            break
        improvement = (obj - t_obj) / max(obj, _TINY)
        params, obj, err, r = trial, t_obj, t_err, t_r
        history.append((epoch, obj, err, eta))
        eta = min(eta * 1.25, cfg.learning_rate)
        streak = streak + 1 if improvement < cfg.tolerance else 0
        if streak >= cfg.patience or obj == 0.0:
            break
    return params, obj, history


def train(ds: RatingDataset, kind: ModelKind | str, cfg: TrainConfig) -> Factorization:
    """Fit ``kind`` on ``ds``; returns the restart with the lowest objective."""
    kind = ModelKind.parse(kind)
    problems = cfg.validate()
    if problems:
        raise ValueError("; ".join(problems))
    if ds.n == 0:
        raise ValueError("cannot train on an empty dataset")
    problem = _Problem(ds, kind, cfg.lam, cfg.bias_penalty)
    best = None
    for k, child in enumerate(np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)):
        try:
            params, obj, history = _run(problem, cfg, np.random.default_rng(child))
        except NumericalError as exc:
            log.warning("%s restart %d aborted: %s", kind.value, k, exc)
            continue
        log.info("%s d=%d restart %d: objective %.6g after %d epochs", kind.value, cfg.d, k, obj, len(history) - 1)
        if best is None or obj < best[1]:
            best = (params, obj, history)
    if best is None:
        raise NumericalError(f"all {cfg.restarts} restarts of {kind.value} diverged")
    (A, Bt, bi, bu), _, history = best
    return Factorization(
        A=A,
        B=Bt.T,
        kind=kind,
        lam=cfg.lam,
        mu=problem.mu,
        item_bias=bi,
        user_bias=bu,
        bias_penalty=cfg.bias_penalty,
        seed=cfg.seed,
        history=tuple(history),
    )


def with_params(f: Factorization, **changes) -> Factorization:
    return replace(f, **changes)


def holdout_split(ds: RatingDataset, fraction: float, seed: int = 0) -> tuple[RatingDataset, RatingDataset]:
    """Random rating-level split; both parts keep the full item/user index space."""
    hold = np.random.default_rng(seed).random(ds.n) < fraction
    parts = []
    for mask in (~hold, hold):
        parts.append(
            RatingDataset(
                ds.item_idx[mask], ds.user_idx[mask], ds.values[mask], ds.item_ids, ds.user_ids, ds.scale_min, ds.scale_max
            )
        )
    return parts[0], parts[1]


def select_lambda(
    ds: RatingDataset,
    kind: ModelKind | str,
    cfg: TrainConfig,
    grid=(0.01, 0.02, 0.04, 0.1, 0.2),
    holdout: float = 0.1,
    seed: int = 0,
) -> tuple[float, dict[float, float]]:
    """Regularization constant with the lowest held-out SSE.

    Returns ``(best_lambda, {lambda: held-out SSE})``.
    """
    fit_part, test_part = holdout_split(ds, holdout, seed)
    scores = {}
    for lam in grid:
        f = train(fit_part, kind, replace(cfg, lam=float(lam)))
        scores[float(lam)] = sse(test_part, f)
        log.info("lambda %.4g: held-out SSE %.6g", lam, scores[float(lam)])
    best = min(scores, key=scores.get)
    return best, scores


# -- files -------------------------------------------------------------------


def write_training_log(f: Factorization, path: str | os.PathLike):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "objective", "sse", "step_scale"])
        for epoch, obj, err, eta in f.history:
            w.writerow([epoch, repr(float(obj)), repr(float(err)), repr(float(eta))])


def save_factorization(f: Factorization, path: str | os.PathLike, meta: dict | None = None):
    header = {
        "format": "ratingspace.factorization",
        "version": SNAPSHOT_VERSION,
        "model_kind": f.kind.value,
        "items": f.n_items,
        "users": f.n_users,
        "d": f.d,
        "lambda": f.lam,
        "seed": f.seed,
        "mu": f.mu,
        "bias_penalty": f.bias_penalty,
        **(meta or {}),
    }
    arrays = {"A": f.A, "B": f.B, "history": np.array(f.history, dtype=float).reshape(-1, 4)}
    if f.has_bias:
        arrays.update(item_bias=f.item_bias, user_bias=f.user_bias)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **arrays)


def load_factorization(path: str | os.PathLike) -> Factorization:
    with np.load(path, allow_pickle=False) as z:
        h = json.loads(str(z["header"]))
        if h.get("format") != "ratingspace.factorization" or h["version"] > SNAPSHOT_VERSION:
            raise ValueError(f"{path} is not a supported factorization snapshot")
        history = tuple((int(e), o, s, t) for e, o, s, t in z["history"])
        return Factorization(
            A=z["A"],
            B=z["B"],
            kind=h["model_kind"],
            lam=h["lambda"],
            mu=h["mu"],
            item_bias=z["item_bias"] if "item_bias" in z else None,
            user_bias=z["user_bias"] if "user_bias" in z else None,
            bias_penalty=h.get("bias_penalty", "squared"),
            seed=h["seed"],
            history=history,
        )


def export_factorization_csv(f: Factorization, ds: RatingDataset, directory: str | os.PathLike):
    """``items.csv`` and ``users.csv`` keyed by external id."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cols = [f"f{r}" for r in range(f.d)]
    for name, ids, mat, bias in (
        ("items.csv", ds.item_ids, f.A, f.item_bias),
        ("users.csv", ds.user_ids, f.B.T, f.user_bias),
    ):
        with open(directory / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", *cols, *(["bias"] if bias is not None else [])])
            for k, ext in enumerate(ids):
                row = [ext, *(repr(float(x)) for x in mat[k])]
                if bias is not None:
                    row.append(repr(float(bias[k])))
                w.writerow(row)
