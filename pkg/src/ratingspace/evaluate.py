"""Evaluation protocol: train/test splits, kappa bookkeeping and table rendering."""

from __future__ import annotations

import csv
import logging
import math
import os
import warnings
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import classify as cl
from .errors import DataError
from .ingest import LabelSet
from .standardize import CoordinateSpace

log = logging.getLogger(__name__)

MINUS = "−"


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True, eq=False)
class SplitPlan:
    pairs: tuple[tuple[np.ndarray, np.ndarray], ...]
    n_items: int
    train_fraction: float = 0.4
    test_fraction: float = 0.1
    test_of_remaining: bool = True
    seed: int = 0

    def __len__(self) -> int:
        return len(self.pairs)


def split_sizes(n_items: int, train_fraction: float, test_fraction: float, test_of_remaining: bool = True):
    n_train = _round_half_up(train_fraction * n_items)
    base = n_items - n_train if test_of_remaining else n_items
    n_test = _round_half_up(test_fraction * base)
    return n_train, n_test


def make_splits(
    n_items: int,
    n_pairs: int = 20,
    seed: int = 0,
    train_fraction: float = 0.4,
    test_fraction: float = 0.1,
    test_of_remaining: bool = True,
) -> SplitPlan:
    """Random disjoint train/test item sets, one pair per run.

    By default the test share is taken from the items left after drawing
    the training set, so 0.4/0.1 uses 40% and 6% of all items.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    n_train, n_test = split_sizes(n_items, train_fraction, test_fraction, test_of_remaining)
    if n_train < 1 or n_test < 1 or n_train + n_test > n_items:
        raise ValueError(f"{n_items} items are too few for a {train_fraction}/{test_fraction} split")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        perm = rng.permutation(n_items)
        pairs.append((np.sort(perm[:n_train]), np.sort(perm[n_train : n_train + n_test])))
    return SplitPlan(tuple(pairs), n_items, train_fraction, test_fraction, test_of_remaining, seed)


@dataclass(frozen=True)
class Outcome:
    """Confusion counts of one binary classification run."""

    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_predictions(cls, predicted: np.ndarray, truth: np.ndarray) -> "Outcome":
        p = np.asarray(predicted, dtype=bool)
        t = np.asarray(truth, dtype=bool)
        return cls(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t)), int(np.sum(~p & ~t)))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def fractions(self) -> tuple[Fraction, Fraction, Fraction, Fraction]:
        """Exact ``(a_tp, a_fp, a_fn, a_tn)``."""
        n = self.total
        return tuple(Fraction(c, n) for c in (self.tp, self.fp, self.fn, self.tn))

    @property
    def accuracy(self) -> Fraction:
        a_tp, _, _, a_tn = self.fractions()
        return a_tp + a_tn

    @property
    def majority_accuracy(self) -> Fraction:
        a_tp, a_fp, a_fn, a_tn = self.fractions()
        return max(a_tp + a_fn, a_fp + a_tn)


def kappa(o: Outcome) -> float | None:
    """Accuracy gain over the majority baseline, ``(acc - maj) / (1 - maj)``.

    ``None`` when the test set holds a single class (``maj == 1``).
    """
    if o.total == 0:
        return None
    maj = o.majority_accuracy
    if maj == 1:
        return None
    return float((o.accuracy - maj) / (1 - maj))


@dataclass
class EvalReport:
    spaces: list[str]
    classifiers: list[str]
    genres: list[str]
    n_splits: int
    dims: dict[str, int] = field(default_factory=dict)
    families: dict[str, str] = field(default_factory=dict)
    cells: dict[tuple[str, str, str, int], float | None] = field(default_factory=dict)

    def values(self, space: str, classifier: str, genre: str | None = None) -> list[float]:
        genres = self.genres if genre is None else [genre]
        out = []
        for g in genres:
            for k in range(self.n_splits):
                v = self.cells.get((space, classifier, g, k))
                if v is not None:
                    out.append(v)
        return out

    def cell_mean(self, space: str, classifier: str, genre: str) -> float | None:
        vals = self.values(space, classifier, genre)
        return math.fsum(vals) / len(vals) if vals else None

    def mean(self, space: str, classifier: str) -> float | None:
        """Unweighted mean over every included (genre, split) cell."""
        vals = self.values(space, classifier)
        return math.fsum(vals) / len(vals) if vals else None

    def excluded(self) -> list[tuple[str, str, str, int]]:
        return [k for k, v in self.cells.items() if v is None]

    def drop_space(self, space: str) -> "EvalReport":
        return EvalReport(
            [s for s in self.spaces if s != space],
            list(self.classifiers),
            list(self.genres),
            self.n_splits,
            {k: v for k, v in self.dims.items() if k != space},
            {k: v for k, v in self.families.items() if k != space},
            {k: v for k, v in self.cells.items() if k[0] != space},
        )


def _family(space: CoordinateSpace) -> str:
    return str(space.provenance.get("extractor", space.name.rsplit("-", 1)[0]))


def _check_universe(space: CoordinateSpace, labels: LabelSet):
    if space.n_items != labels.n_items:
        raise DataError(f"space {space.name} has {space.n_items} items, labels cover {labels.n_items}")
    if space.item_ids is not None and not np.array_equal(space.item_ids, labels.item_ids):
        raise DataError(f"space {space.name} and the label set disagree on item ids")


def _evaluate_cell_group(space: CoordinateSpace, Y: np.ndarray, train, test, specs: Sequence[cl.ClassifierSpec]):
    """All classifiers x genres for one (space, split); returns {(clf, g): kappa}."""
    X = space.coords
    Xtr, Xte = X[train], X[test]
    Ytr, Yte = Y[train], Y[test]
    out = {}
    kernels = {}
    by_kind: dict[cl.DistanceKind, list[cl.ClassifierSpec]] = defaultdict(list)
    for spec in specs:
        if spec.family == "knn":
            by_kind[spec.distance].append(spec)
    for spec in specs:
        if spec.family != "svm":
            continue
        K = None
        if not spec.standardize:
            key = (spec.kernel, spec.gamma)
            if key not in kernels:
                kernels[key] = cl.kernel_matrix(spec.kernel, Xtr, Xtr, spec.gamma)
            K = kernels[key]
        for g in range(Y.shape[1]):
            model = cl.svm_train(cl.LabeledPoints(Xtr, Ytr[:, g]), spec.kernel, spec.C, spec.gamma, spec.standardize, K=K)
            pred = cl.svm_predict_batch(model, Xte)
            out[(spec.id, g)] = kappa(Outcome.from_predictions(pred, Yte[:, g]))
    for kind, group in by_kind.items():
        kmax = max(s.k for s in group)
        if kmax > len(train):
            raise ValueError(f"k={kmax} exceeds the {len(train)} training items")
        scale = cl.fit_scale(Xtr) if kind is cl.DistanceKind.STANDARDIZED_EUCLIDEAN else None
        order = cl.neighbor_order(cl.pairwise_distances(kind, Xte, Xtr, scale), kmax)
        for spec in group:
            for g in range(Y.shape[1]):
                pred = cl.knn_vote(order, Ytr[:, g], spec.k)
                out[(spec.id, g)] = kappa(Outcome.from_predictions(pred, Yte[:, g]))
    return out


def run_experiment(
    spaces: Sequence[CoordinateSpace],
    labels: LabelSet,
    plan: SplitPlan,
    classifiers: Sequence[cl.ClassifierSpec | str],
    workers: int = 1,
) -> EvalReport:
    """Evaluate every (space, classifier, genre, split) cell.

    Cells whose test set holds one class only are kept as ``None`` and left
    out of the means.
    """
    specs = [c if isinstance(c, cl.ClassifierSpec) else cl.parse_classifier(c) for c in classifiers]
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate classifier ids")
    names = [s.name for s in spaces]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate space names: {names}")
    for space in spaces:
        _check_universe(space, labels)
    if plan.n_items != labels.n_items:
        raise DataError(f"split plan covers {plan.n_items} items, labels cover {labels.n_items}")
    Y = labels.assignments
    tasks = [(si, k) for si in range(len(spaces)) for k in range(len(plan))]

    def work(task):
        si, k = task
        train, test = plan.pairs[k]
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            res = _evaluate_cell_group(spaces[si], Y, train, test, specs)
        return task, res, len(caught)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, tasks))
    else:
        results = [work(t) for t in tasks]

    report = EvalReport(
        names,
        ids,
        list(labels.labels),
        len(plan),
        {s.name: s.d for s in spaces},
        {s.name: _family(s) for s in spaces},
    )
    n_warn = 0
    for (si, k), res, nw in sorted(results, key=lambda r: r[0]):
        n_warn += nw
        for spec_id in ids:
            for g, genre in enumerate(labels.labels):
                report.cells[(names[si], spec_id, genre, k)] = res[(spec_id, g)]
    if n_warn:
        log.info("%d classifier warnings (degenerate training sets or zero-variance dimensions)", n_warn)
    n_ex = len(report.excluded())
    if n_ex:
        log.warning("%d cells excluded: single-class test set, kappa undefined", n_ex)
    return report


# -- output ------------------------------------------------------------------


def format_kappa(value: float | None, minus: str = MINUS) -> str:
    if value is None:
        return "n/a"
    q = Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    text = f"{q:.2f}"
    return text.replace("-", minus)


def _family_groups(report: EvalReport) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for s in report.spaces:
        groups.setdefault(report.families.get(s, s), []).append(s)
    for fam in groups:
        groups[fam].sort(key=lambda s: report.dims.get(s, 0))
    return groups


def _layout(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[c]) for r in [header, *rows]) for c in range(len(header))]
    lines = []
    for n, row in enumerate([header, *rows]):
        cells = [row[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _cell(value: float | None, threshold: float, style: str) -> str:
    if style == "tsv":
        return format_kappa(value, "-")
    text = format_kappa(value)
    if value is not None and value > threshold:
        text = f"**{text}**"
    return text


def _render(header, rows, style):
    if style == "tsv":
        return "\n".join("\t".join(r) for r in [header, *rows]) + "\n"
    return _layout(header, rows)


def render_tables(
    report: EvalReport,
    bold_threshold: float = 0.10,
    genre_threshold: float = 0.20,
    style: str = "text",
) -> dict[str, str]:
    """Mean-kappa tables.

    One ``classifier x dimensionality`` table per extractor family (keyed by
    the family name) and one ``genre x space`` table per classifier (keyed
    ``genres-<classifier>``) over the largest-d space of each family.
    Entries above the threshold are wrapped in ``**`` in text style.
    """
    if style not in ("text", "tsv"):
        raise ValueError("style must be 'text' or 'tsv'")
    tables = {}
    groups = _family_groups(report)
    for fam, spaces in groups.items():
        header = ["", *spaces]
        rows = [[c, *(_cell(report.mean(s, c), bold_threshold, style) for s in spaces)] for c in report.classifiers]
        tables[fam] = _render(header, rows, style)
    top = [spaces[-1] for spaces in groups.values()]
    for c in report.classifiers:
        header = ["", *top]
        rows = [[g, *(_cell(report.cell_mean(s, c, g), genre_threshold, style) for s in top)] for g in report.genres]
        tables[f"genres-{c}"] = _render(header, rows, style)
    return tables


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def write_report(report: EvalReport, directory: str | os.PathLike, bold_threshold=0.10, genre_threshold=0.20):
    """Cell CSV, aggregate CSVs and text/TSV tables under ``directory``."""
    directory = Path(directory)
    (directory / "tables").mkdir(parents=True, exist_ok=True)
    with open(directory / "kappas.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["space", "d", "classifier", "genre", "split", "kappa"])
        for s in report.spaces:
            for c in report.classifiers:
                for g in report.genres:
                    for k in range(report.n_splits):
                        w.writerow([s, report.dims[s], c, g, k, _fmt(report.cells.get((s, c, g, k)))])
    with open(directory / "means.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["space", "d", "classifier", "mean_kappa", "cells"])
        for s in report.spaces:
            for c in report.classifiers:
                w.writerow([s, report.dims[s], c, _fmt(report.mean(s, c)), len(report.values(s, c))])
    with open(directory / "genre_means.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["space", "d", "classifier", "genre", "mean_kappa", "cells"])
        for s in report.spaces:
            for c in report.classifiers:
                for g in report.genres:
                    w.writerow([s, report.dims[s], c, g, _fmt(report.cell_mean(s, c, g)), len(report.values(s, c, g))])
    for style, ext in (("text", "txt"), ("tsv", "tsv")):
        for name, table in render_tables(report, bold_threshold, genre_threshold, style).items():
            (directory / "tables" / f"{_slug(name)}.{ext}").write_text(table)


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)


def read_report(directory: str | os.PathLike) -> EvalReport:
    """Rebuild a report from ``kappas.csv``; families come from space names."""
    spaces, classifiers, genres = [], [], []
    dims, cells = {}, {}
    n_splits = 0
    with open(Path(directory) / "kappas.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            s, c, g, k = row["space"], row["classifier"], row["genre"], int(row["split"])
            for seq, v in ((spaces, s), (classifiers, c), (genres, g)):
                if v not in seq:
                    seq.append(v)
            dims[s] = int(row["d"])
            n_splits = max(n_splits, k + 1)
            cells[(s, c, g, k)] = float(row["kappa"]) if row["kappa"] else None
    families = {s: s.rsplit("-", 1)[0] for s in spaces}
    return EvalReport(spaces, classifiers, genres, n_splits, dims, families, cells)
