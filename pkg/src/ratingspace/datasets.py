"""Synthetic rating generators and a MovieLens 100K fetcher for desk-scale runs."""

from __future__ import annotations

import csv
import logging
import os
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from .ingest import from_triples

log = logging.getLogger(__name__)

# RecBole ships the complete MovieLens 100K ratings and genres as package data.
_ML100K_WHEEL = "recbole==1.2.1"
_ML100K_MEMBERS = {
    "inter": "recbole/dataset_example/ml-100k/ml-100k.inter",
    "item": "recbole/dataset_example/ml-100k/ml-100k.item",
}


def ml100k_dir() -> Path:
    return Path(os.environ.get("RATINGSPACE_ML100K", Path.home() / ".cache" / "ratingspace" / "ml-100k"))


def prepare_ml100k(dest: str | os.PathLike | None = None, wheel: str | os.PathLike | None = None) -> Path:
    """Write ``ratings.csv`` (item,user,rating) and ``genres.csv`` (item_id,label).

    ``wheel`` points at a local RecBole wheel; otherwise one is fetched with
    ``pip download``.  Existing output is reused.
    """
    dest = Path(dest) if dest is not None else ml100k_dir()
    ratings, genres = dest / "ratings.csv", dest / "genres.csv"
    if ratings.exists() and genres.exists():
        return dest
    dest.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        if wheel is None:
            subprocess.run(
                [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, _ML100K_WHEEL],
                check=True,
            )
            wheel = next(Path(tmp).glob("recbole-*.whl"))
        with zipfile.ZipFile(wheel) as z:
            inter = z.read(_ML100K_MEMBERS["inter"]).decode("utf-8")
            items = z.read(_ML100K_MEMBERS["item"]).decode("latin-1")
    with open(ratings, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item", "user", "rating"])
        for line in inter.splitlines()[1:]:
            user, item, rating, _ = line.split("\t")
            w.writerow([item, user, rating])
    with open(genres, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id", "label"])
        for line in items.splitlines()[1:]:
            fields = line.split("\t")
            for label in fields[3].split():
                if label != "unknown":
                    w.writerow([fields[0], label])
    log.info("wrote MovieLens 100K to %s", dest)
    return dest


def planted_ratings(
    n_items: int = 500,
    n_users: int = 2000,
    d: int = 10,
    density: float = 0.1,
    noise: float = 0.3,
    seed: int = 0,
    scale: tuple[float, float] = (0.5, 5.0),
):
    """Ratings generated from known item/user factors.

    Returns ``(dataset, item_factors)``.  Ratings are ``3 + a_i . b_u``
    plus Gaussian noise, clipped to ``scale`` and rounded to half stars.
    """
    rng = np.random.default_rng(seed)
    A = rng.normal(0.0, 1.0, (n_items, d)) / np.sqrt(d) * np.linspace(1.5, 0.5, d)
    B = rng.normal(0.0, 1.0, (d, n_users))
    mask = rng.random((n_items, n_users)) < density
    # every item and user keeps at least one rating
    mask[np.arange(n_items), rng.integers(0, n_users, n_items)] = True
    mask[rng.integers(0, n_items, n_users), np.arange(n_users)] = True
    ii, uu = np.nonzero(mask)
    raw = 3.0 + np.einsum("ij,ji->i", A[ii], B[:, uu]) + rng.normal(0.0, noise, len(ii))
    values = np.clip(np.round(raw * 2) / 2, *scale)
    ds = from_triples(ii, uu, values, scale=scale)
    return ds, A


def write_planted_files(directory: str | os.PathLike, n_items=200, n_users=400, d=5, seed=0, density=0.2):
    """Synthetic ratings plus threshold-rule genres for smoke runs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ds, A = planted_ratings(n_items, n_users, d, density=density, seed=seed)
    with open(directory / "ratings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item", "user", "rating"])
        for i, u, r in zip(ds.item_idx, ds.user_idx, ds.values):
            w.writerow([ds.item_ids[i], ds.user_ids[u], r])
    with open(directory / "genres.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id", "label"])
        for i, ext in enumerate(ds.item_ids):
            if A[i, 0] > 0:
                w.writerow([ext, "Alpha"])
            if A[i, 1] > 0.1:
                w.writerow([ext, "Beta"])
    return directory
