"""Rating and label ingestion.

Ratings arrive either as MovieLens ``UserID::MovieID::Rating::Timestamp``
records or as a headered CSV with ``item,user,rating`` columns.  Both are
re-indexed densely; the external identifiers are kept on the dataset so
labels and reports can refer back to them.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Literal, Sequence

import numpy as np
import pandas as pd

from .errors import DataError, DuplicateRatingError, MalformedRecordError, ScaleError

log = logging.getLogger(__name__)

RatingFormat = Literal["movielens", "csv"]
FORMATS = ("movielens", "csv")
SNAPSHOT_VERSION = 1

_CSV_ALIASES = {
    "item": ("item", "item_id", "movie", "movie_id", "movieid", "itemid"),
    "user": ("user", "user_id", "userid"),
    "rating": ("rating", "value", "score"),
}


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RatingDataset:
    """Sparse item-user ratings with dense indices.

    Ratings are stored sorted by ``(item, user)``.  ``item_ids[i]`` and
    ``user_ids[u]`` hold the external identifiers of dense index ``i``/``u``.
    """

    item_idx: np.ndarray
    user_idx: np.ndarray
    values: np.ndarray
    item_ids: np.ndarray
    user_ids: np.ndarray
    scale_min: float = 0.5
    scale_max: float = 5.0

    def __post_init__(self):
        item_idx = np.asarray(self.item_idx, dtype=np.int64)
        user_idx = np.asarray(self.user_idx, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if not (len(item_idx) == len(user_idx) == len(values)):
            raise DataError("ratings columns have different lengths")
        order = np.lexsort((user_idx, item_idx))
        item_idx, user_idx, values = item_idx[order], user_idx[order], values[order]
        object.__setattr__(self, "item_idx", _freeze(item_idx))
        object.__setattr__(self, "user_idx", _freeze(user_idx))
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "item_ids", _freeze(np.asarray(self.item_ids, dtype=str)))
        object.__setattr__(self, "user_ids", _freeze(np.asarray(self.user_ids, dtype=str)))
        self._validate()

    def _validate(self):
        n_items, n_users = len(self.item_ids), len(self.user_ids)
        if self.n:
            if self.item_idx.min() < 0 or self.item_idx.max() >= n_items:
                raise DataError("item index out of range")
            if self.user_idx.min() < 0 or self.user_idx.max() >= n_users:
                raise DataError("user index out of range")
            same = (np.diff(self.item_idx) == 0) & (np.diff(self.user_idx) == 0)
            if same.any():
                k = int(np.flatnonzero(same)[0])
                raise DuplicateRatingError(
                    f"duplicate rating for item {self.item_ids[self.item_idx[k]]}, "
                    f"user {self.user_ids[self.user_idx[k]]}"
                )
            bad = (self.values < self.scale_min) | (self.values > self.scale_max) | ~np.isfinite(self.values)
            if bad.any():
                k = int(np.flatnonzero(bad)[0])
                raise ScaleError(
                    f"rating {self.values[k]} outside [{self.scale_min}, {self.scale_max}]"
                )

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    def item_counts(self) -> np.ndarray:
        return np.bincount(self.item_idx, minlength=self.n_items)

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.user_idx, minlength=self.n_users)

    def mean(self) -> float:
        return float(self.values.mean()) if self.n else 0.0

    def to_sparse(self):
        """I x U ``scipy.sparse.csr_matrix`` of the observed ratings."""
        from scipy import sparse

        return sparse.csr_matrix(
            (self.values, (self.item_idx, self.user_idx)), shape=(self.n_items, self.n_users)
        )

    def equals(self, other: "RatingDataset") -> bool:
        return (
            self.scale_min == other.scale_min
            and self.scale_max == other.scale_max
            and np.array_equal(self.item_ids, other.item_ids)
            and np.array_equal(self.user_ids, other.user_ids)
            and np.array_equal(self.item_idx, other.item_idx)
            and np.array_equal(self.user_idx, other.user_idx)
            and np.array_equal(self.values, other.values)
        )


def _id_order(ids: np.ndarray) -> np.ndarray:
    """Sorted unique ids; numeric order when every id is an integer literal."""
    uniq = np.unique(ids)
    try:
        keys = np.array([int(x) for x in uniq])
    except ValueError:
        return uniq
    return uniq[np.argsort(keys, kind="stable")]


def _densify(ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    uniq = _id_order(ids)
    lookup = pd.Index(uniq)
    codes = lookup.get_indexer(ids)
    return codes.astype(np.int64), uniq


def from_triples(
    items: Sequence,
    users: Sequence,
    values: Sequence[float],
    scale: tuple[float, float] = (0.5, 5.0),
    dedupe: str | None = None,
) -> RatingDataset:
    """Build a dataset from parallel sequences of external ids and ratings."""
    items = np.asarray(items).astype(str)
    users = np.asarray(users).astype(str)
    values = np.asarray(values, dtype=np.float64)
    if dedupe not in (None, "keep-last"):
        raise ValueError(f"unknown dedupe policy {dedupe!r}")
    if len(values) == 0:
        return RatingDataset(
            np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0), np.empty(0, str), np.empty(0, str),
            scale[0], scale[1],
        )
    item_idx, item_ids = _densify(items)
    user_idx, user_ids = _densify(users)
    if dedupe == "keep-last":
        key = item_idx * len(user_ids) + user_idx
        # last occurrence of each key wins
        _, last = np.unique(key[::-1], return_index=True)
        keep = np.sort(len(key) - 1 - last)
        if len(keep) < len(key):
            log.warning("dropped %d duplicate ratings (keep-last)", len(key) - len(keep))
        item_idx, user_idx, values = item_idx[keep], user_idx[keep], values[keep]
    return RatingDataset(item_idx, user_idx, values, item_ids, user_ids, scale[0], scale[1])


def _read_bytes(source: BinaryIO | bytes | str | os.PathLike) -> bytes:
    if isinstance(source, bytes):
        return source
    if isinstance(source, (str, os.PathLike)):
        return Path(source).read_bytes()
    data = source.read()
    return data.encode() if isinstance(data, str) else data


def _scan_movielens(text: str):
    """Slow line-by-line parse; pinpoints the first malformed record."""
    items, users, values = [], [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 4:
            raise MalformedRecordError(lineno, f"expected 4 '::'-separated fields, got {len(parts)}")
        user, item, rating, ts = (p.strip() for p in parts)
        if not user or not item:
            raise MalformedRecordError(lineno, "empty identifier")
        try:
            value = float(rating)
            int(ts)
        except ValueError:
            raise MalformedRecordError(lineno, f"cannot parse rating/timestamp in {line!r}") from None
        items.append(item)
        users.append(user)
        values.append(value)
    return items, users, values


def _scan_csv(text: str):
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        return [], [], []
    cols = {}
    for key, aliases in _CSV_ALIASES.items():
        hit = [k for k, h in enumerate(header) if h in aliases]
        if not hit:
            raise MalformedRecordError(1, f"header lacks a {key!r} column: {header}")
        cols[key] = hit[0]
    items, users, values = [], [], []
    for row in reader:
        lineno = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise MalformedRecordError(lineno, f"expected {len(header)} fields, got {len(row)}")
        item, user = row[cols["item"]].strip(), row[cols["user"]].strip()
        if not item or not user:
            raise MalformedRecordError(lineno, "empty identifier")
        try:
            values.append(float(row[cols["rating"]]))
        except ValueError:
            raise MalformedRecordError(lineno, f"cannot parse rating {row[cols['rating']]!r}") from None
        items.append(item)
        users.append(user)
    return items, users, values


def _fast_movielens(data: bytes):
    frame = pd.read_csv(
        io.BytesIO(data.replace(b"::", b"\t")),
        sep="\t",
        header=None,
        names=["user", "item", "rating", "ts"],
        dtype={"user": str, "item": str, "rating": np.float64, "ts": np.int64},
        skip_blank_lines=True,
        on_bad_lines="error",
    )
    if frame.isna().any().any():
        raise ValueError("missing fields")
    return frame["item"].to_numpy(), frame["user"].to_numpy(), frame["rating"].to_numpy()


def parse_ratings(
    source: BinaryIO | bytes | str | os.PathLike,
    format: RatingFormat = "movielens",
    scale: tuple[float, float] = (0.5, 5.0),
    dedupe: str | None = None,
) -> RatingDataset:
    """Parse a rating stream into a :class:`RatingDataset`.

    Raises :class:`MalformedRecordError` (with the line number),
    :class:`DuplicateRatingError` or :class:`ScaleError`.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown rating format {format!r}; expected one of {FORMATS}")
    data = _read_bytes(source)
    if format == "movielens":
        try:
            items, users, values = _fast_movielens(data) if data.strip() else ([], [], [])
        except (ValueError, pd.errors.ParserError):
            items, users, values = _scan_movielens(data.decode("utf-8"))
    else:
        items, users, values = _scan_csv(data.decode("utf-8"))
    return from_triples(items, users, values, scale=scale, dedupe=dedupe)


def write_ratings_csv(ds: RatingDataset, dest: io.TextIOBase | str | os.PathLike):
    """Write the dataset as generic ``item,user,rating`` CSV (external ids)."""
    frame = pd.DataFrame(
        {
            "item": ds.item_ids[ds.item_idx],
            "user": ds.user_ids[ds.user_idx],
            "rating": ds.values,
        }
    )
    frame.to_csv(dest, index=False, float_format="%.17g", lineterminator="\n")


def filter_min_ratings(ds: RatingDataset, min_per_item: int, min_per_user: int = 0) -> RatingDataset:
    """Drop items with fewer than ``min_per_item`` ratings, then users left empty.

    ``min_per_user`` is applied once, after the item filter.
    """
    if min_per_item < 0 or min_per_user < 0:
        raise ValueError("thresholds must be >= 0")
    keep = ds.item_counts()[ds.item_idx] >= min_per_item
    if min_per_user:
        kept_users = np.bincount(ds.user_idx[keep], minlength=ds.n_users)
        keep &= kept_users[ds.user_idx] >= min_per_user
    if keep.all() and np.all(ds.user_counts() > 0) and np.all(ds.item_counts() > 0):
        return ds
    items, users = ds.item_idx[keep], ds.user_idx[keep]
    used_items = np.unique(items)
    used_users = np.unique(users)
    return RatingDataset(
        np.searchsorted(used_items, items),
        np.searchsorted(used_users, users),
        ds.values[keep],
        ds.item_ids[used_items],
        ds.user_ids[used_users],
        ds.scale_min,
        ds.scale_max,
    )


# -- snapshots ---------------------------------------------------------------


def save_dataset(ds: RatingDataset, path: str | os.PathLike, meta: dict | None = None):
    """Binary snapshot (``.npz``) plus an ``<name>.ids.csv`` id-mapping sidecar."""
    path = Path(path)
    header = {
        "format": "ratingspace.dataset",
        "version": SNAPSHOT_VERSION,
        "n": ds.n,
        "items": ds.n_items,
        "users": ds.n_users,
        "scale": [ds.scale_min, ds.scale_max],
        **(meta or {}),
    }
    with open(path, "wb") as fh:
        np.savez(
            fh,
            header=np.array(json.dumps(header)),
            item_idx=ds.item_idx,
            user_idx=ds.user_idx,
            values=ds.values,
            item_ids=ds.item_ids,
            user_ids=ds.user_ids,
        )
    sidecar = path.with_suffix(".ids.csv")
    with open(sidecar, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "index", "external_id"])
        w.writerows(("item", i, x) for i, x in enumerate(ds.item_ids))
        w.writerows(("user", u, x) for u, x in enumerate(ds.user_ids))


def read_header(path: str | os.PathLike) -> dict:
    with np.load(path, allow_pickle=False) as z:
        return json.loads(str(z["header"]))


def load_dataset(path: str | os.PathLike) -> RatingDataset:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != "ratingspace.dataset":
            raise DataError(f"{path} is not a dataset snapshot")
        if header["version"] > SNAPSHOT_VERSION:
            raise DataError(f"unsupported dataset snapshot version {header['version']}")
        lo, hi = header["scale"]
        return RatingDataset(z["item_idx"], z["user_idx"], z["values"], z["item_ids"], z["user_ids"], lo, hi)


# -- labels ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LabelSet:
    """Multi-label genre assignments aligned with a dataset's item indices.

    ``assignments`` is a boolean ``I x G`` matrix, column ``g`` belonging to
    ``labels[g]``.
    """

    labels: tuple[str, ...]
    assignments: np.ndarray
    item_ids: np.ndarray
    cutoff: float = 0.0
    frequencies: np.ndarray = field(init=False)

    def __post_init__(self):
        a = _freeze(np.asarray(self.assignments, dtype=bool).reshape(len(self.item_ids), len(self.labels)))
        object.__setattr__(self, "assignments", a)
        object.__setattr__(self, "item_ids", _freeze(np.asarray(self.item_ids, dtype=str)))
        object.__setattr__(self, "labels", tuple(self.labels))
        n = len(self.item_ids)
        freq = a.sum(axis=0) / n if n else np.zeros(len(self.labels))
        object.__setattr__(self, "frequencies", _freeze(freq))

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def column(self, label: str) -> np.ndarray:
        return self.assignments[:, self.labels.index(label)]

    def items_labels(self, i: int) -> set[str]:
        return {g for g, held in zip(self.labels, self.assignments[i]) if held}

    def mean_labels_per_item(self) -> float:
        return float(self.assignments.sum(axis=1).mean()) if self.n_items else 0.0


def parse_labels(
    source: BinaryIO | bytes | str | os.PathLike,
    ds: RatingDataset,
    cutoff: float = 0.05,
    unknown: Literal["skip", "fail"] = "skip",
) -> LabelSet:
    """Parse a headered ``item_id,label`` CSV against the items of ``ds``.

    Labels held by fewer than ``cutoff`` of the dataset's items are dropped;
    frequencies are relative to all items of ``ds``, labelled or not.
    """
    if not 0.0 <= cutoff <= 1.0:
        raise ValueError("cutoff must lie in [0, 1]")
    text = _read_bytes(source).decode("utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise DataError("label file is empty") from None
    try:
        ci = next(k for k, h in enumerate(header) if h in ("item_id", "item", "movie_id"))
        cl = next(k for k, h in enumerate(header) if h in ("label", "genre"))
    except StopIteration:
        raise MalformedRecordError(1, f"label header must contain item_id and label: {header}") from None

    position = {x: i for i, x in enumerate(ds.item_ids)}
    pairs: set[tuple[int, str]] = set()
    skipped: set[str] = set()
    for row in reader:
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) <= max(ci, cl):
            raise MalformedRecordError(reader.line_num, "too few fields")
        item, label = row[ci].strip(), row[cl].strip()
        if not label:
            raise MalformedRecordError(reader.line_num, "empty label")
        if item not in position:
            if unknown == "fail":
                raise DataError(f"line {reader.line_num}: unknown item id {item!r}")
            skipped.add(item)
            continue
        pairs.add((position[item], label))
    if skipped:
        log.warning("skipped labels of %d unknown item ids", len(skipped))
    return _build_labelset(pairs, ds.item_ids, cutoff)


def _build_labelset(pairs: Iterable[tuple[int, str]], item_ids: np.ndarray, cutoff: float) -> LabelSet:
    pairs = list(pairs)
    names = sorted({g for _, g in pairs})
    col = {g: k for k, g in enumerate(names)}
    n = len(item_ids)
    a = np.zeros((n, len(names)), dtype=bool)
    for i, g in pairs:
        a[i, col[g]] = True
    if n == 0:
        raise DataError("no items to label")
    keep = [k for k in range(len(names)) if a[:, k].sum() / n >= cutoff]
    if not keep:
        raise DataError(f"no label reaches the frequency cutoff {cutoff}")
    dropped = [names[k] for k in range(len(names)) if k not in keep]
    if dropped:
        log.info("labels below cutoff %.3f: %s", cutoff, ", ".join(dropped))
    return LabelSet(tuple(names[k] for k in keep), a[:, keep], item_ids, cutoff)


def write_labels_csv(labels: LabelSet, dest: str | os.PathLike):
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id", "label"])
        for i, g in zip(*np.nonzero(labels.assignments)):
            w.writerow([labels.item_ids[i], labels.labels[g]])


def load_labels_snapshot(path: str | os.PathLike) -> LabelSet:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        return LabelSet(tuple(header["labels"]), z["assignments"], z["item_ids"], header["cutoff"])


def save_labels_snapshot(labels: LabelSet, path: str | os.PathLike, meta: dict | None = None):
    header = {
        "format": "ratingspace.labels",
        "version": SNAPSHOT_VERSION,
        "labels": list(labels.labels),
        "cutoff": labels.cutoff,
        **(meta or {}),
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), assignments=labels.assignments, item_ids=labels.item_ids)
