"""Canonical form of a factor pair.

Any pair ``(A, B)`` is equivalent to ``(A M, M^-1 B)`` for invertible ``M``.
The canonical representative comes from the SVD ``A B = U S V``:
``A' = U S^(1/2)`` and ``B' = S^(1/2) V``, axes sorted by decreasing singular
value.  The SVD is taken from the d x d core of two thin QR factorizations,
so the I x U product is never formed.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

SNAPSHOT_VERSION = 1
RANK_RTOL = 1e-10
DEGENERACY_RTOL = 1e-9

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CoordinateSpace:
    """Standardized item coordinates.

    ``column_scales[r]`` equals the squared norm of ``coords[:, r]``; for
    factor models these are the singular values of ``A B``.
    """

    coords: np.ndarray
    column_scales: np.ndarray
    provenance: dict = field(default_factory=dict)
    item_ids: np.ndarray | None = None

    def __post_init__(self):
        c = np.array(self.coords, dtype=np.float64)
        s = np.array(self.column_scales, dtype=np.float64)
        if c.ndim != 2 or s.shape != (c.shape[1],):
            raise ValueError(f"coords {c.shape} and column_scales {s.shape} disagree")
        c.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "column_scales", s)
        if self.item_ids is not None:
            ids = np.asarray(self.item_ids, dtype=str)
            if len(ids) != c.shape[0]:
                raise ValueError("item_ids length does not match coords")
            ids.setflags(write=False)
            object.__setattr__(self, "item_ids", ids)

    @property
    def n_items(self) -> int:
        return self.coords.shape[0]

    @property
    def d(self) -> int:
        return self.coords.shape[1]

    @property
    def name(self) -> str:
        return self.provenance.get("name") or f"{self.provenance.get('extractor', 'space')}-{self.d}"


def _fix_signs(left: np.ndarray, right: np.ndarray | None = None):
    """Flip columns of ``left`` so each column's largest-magnitude entry is positive.

    Ties go to the lowest row index; ``right`` rows are flipped alongside.
    """
    if left.shape[0] == 0:
        return left, right
    pivot = np.argmax(np.abs(left), axis=0)
    signs = np.where(left[pivot, np.arange(left.shape[1])] < 0, -1.0, 1.0)
    left = left * signs
    if right is not None:
        right = right * signs[:, None]
    return left, right


def product_svd(A: np.ndarray, B: np.ndarray):
    """Thin SVD ``U, s, V`` of ``A @ B`` via QR of ``A`` and ``B.T``."""
    Qa, Ra = np.linalg.qr(A)
    Qb, Rb = np.linalg.qr(B.T)
    core = Ra @ Rb.T
    Uc, s, Vct = np.linalg.svd(core)
    return Qa @ Uc, s, Vct @ Qb.T


def standardize(A: np.ndarray, B: np.ndarray, provenance: dict | None = None, item_ids=None):
    """Return ``(CoordinateSpace, B')`` for the factor pair ``(A, B)``.

    Rank-deficient products yield a narrower space (with a warning).
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ValueError(f"incompatible shapes {A.shape} and {B.shape}")
    if not (np.isfinite(A).all() and np.isfinite(B).all()):
        raise ValueError("factors contain non-finite values")
    d = A.shape[1]
    U, s, V = product_svd(A, B)
    rank = int(np.sum(s > RANK_RTOL * s[0])) if s.size and s[0] > 0 else 0
    if rank < d:
        warnings.warn(f"product has rank {rank} < d={d}; returning {rank} axes", RuntimeWarning, stacklevel=2)
        U, s, V = U[:, :rank], s[:rank], V[:rank]
    if rank > 1:
        gaps = -np.diff(s) / s[:-1]
        if np.any(gaps < DEGENERACY_RTOL):
            warnings.warn(
                "near-repeated singular values; canonical axes are unique only per subspace",
                RuntimeWarning,
                stacklevel=2,
            )
    root = np.sqrt(s)
    A1, B1 = _fix_signs(U * root, root[:, None] * V)
    prov = dict(provenance or {})
    prov.setdefault("requested_d", d)
    return CoordinateSpace(A1, s, prov, item_ids), B1


def column_variances(space: CoordinateSpace) -> np.ndarray:
    """Population variance of the coordinates along each axis."""
    if space.n_items == 0:
        return np.zeros(space.d)
    return space.coords.var(axis=0)


def principal_axes(X: np.ndarray) -> np.ndarray:
    """Center ``X`` and rotate it onto its principal axes (decreasing variance)."""
    X = np.asarray(X, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    if Xc.shape[0] == 0:
        return Xc
    _, _, Vt = np.linalg.svd(Xc, full_matrices=False)
    Y = Xc @ Vt.T
    Y, _ = _fix_signs(Y)
    return Y


# -- files -------------------------------------------------------------------


def save_space(space: CoordinateSpace, path: str | os.PathLike, meta: dict | None = None):
    header = {
        "format": "ratingspace.space",
        "version": SNAPSHOT_VERSION,
        "items": space.n_items,
        "d": space.d,
        "provenance": space.provenance,
        **(meta or {}),
    }
    arrays = {"coords": space.coords, "column_scales": space.column_scales}
    if space.item_ids is not None:
        arrays["item_ids"] = space.item_ids
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **arrays)


def load_space(path: str | os.PathLike) -> CoordinateSpace:
    with np.load(path, allow_pickle=False) as z:
        h = json.loads(str(z["header"]))
        if h.get("format") != "ratingspace.space" or h["version"] > SNAPSHOT_VERSION:
            raise ValueError(f"{path} is not a supported coordinate-space snapshot")
        ids = z["item_ids"] if "item_ids" in z else None
        return CoordinateSpace(z["coords"], z["column_scales"], h["provenance"], ids)


def export_space_csv(space: CoordinateSpace, path: str | os.PathLike):
    ids = space.item_ids if space.item_ids is not None else np.arange(space.n_items).astype(str)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id", *(f"x{r}" for r in range(space.d))])
        w.writerow(["#scale", *(repr(float(v)) for v in space.column_scales)])
        for ext, row in zip(ids, space.coords):
            w.writerow([ext, *(repr(float(v)) for v in row)])
