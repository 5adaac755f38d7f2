"""Experiment configuration: TOML loading, defaults and validation."""

from __future__ import annotations

import hashlib
import json
import sys
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import classify as cl
from .errors import ConfigError
from .factor import ModelKind, TrainConfig
from .ingest import FORMATS

FAMILY_NAMES = {ModelKind.SVD: "SVD", ModelKind.DELTA_SVD: "δ-SVD", ModelKind.NNMF: "NNMF"}


@dataclass
class DataConfig:
    ratings: str = "ratings.dat"
    format: str = "movielens"
    labels: str = "genres.csv"
    scale: tuple[float, float] = (0.5, 5.0)
    min_item_ratings: int = 20
    min_user_ratings: int = 0
    label_cutoff: float = 0.05
    dedupe: str | None = None
    unknown_labels: str = "skip"


@dataclass
class ModelConfig:
    id: str
    kind: str
    train: TrainConfig


@dataclass
class MdsSettings:
    enabled: bool = True
    lam: float = 20.0
    dims: tuple[int, ...] = (10, 50, 100)
    max_iter: int = 500
    tolerance: float = 1e-6
    restarts: int = 1


@dataclass
class EvalSettings:
    classifiers: tuple[str, ...] = cl.DEFAULT_CLASSIFIER_IDS
    C: float = cl.DEFAULT_C
    gamma: float = cl.DEFAULT_GAMMA
    svm_standardize: bool = False
    n_pairs: int = 20
    train_fraction: float = 0.4
    test_fraction: float = 0.1
    test_of_remaining: bool = True
    bold_threshold: float = 0.10
    genre_threshold: float = 0.20

    def specs(self) -> list[cl.ClassifierSpec]:
        return [cl.parse_classifier(c, self.C, self.gamma, self.svm_standardize) for c in self.classifiers]


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    models: list[ModelConfig] = field(default_factory=list)
    mds: MdsSettings = field(default_factory=MdsSettings)
    evaluate: EvalSettings = field(default_factory=EvalSettings)
    seed: int = 0
    out: str = "run"
    base_dir: Path = field(default_factory=Path.cwd, compare=False)

    def path(self, value: str) -> Path:
        p = Path(value).expanduser()
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self) -> Path:
        return self.path(self.out)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d


def derive_seed(master: int, *purpose: str) -> int:
    """Sub-seed for one purpose (e.g. ``("model", "SVD-10")``) from the master seed."""
    words = [int(master) & 0xFFFFFFFF, *(zlib.crc32(p.encode("utf-8")) for p in purpose)]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def config_hash(*parts: Any) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str, ensure_ascii=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


_TRAIN_KEYS = {
    "lambda": "lam",
    "learning_rate": "learning_rate",
    "max_epochs": "max_epochs",
    "tolerance": "tolerance",
    "patience": "patience",
    "restarts": "restarts",
    "init_scale": "init_scale",
    "bias_penalty": "bias_penalty",
}


class _Collector:
    def __init__(self):
        self.problems: list[str] = []

    def add(self, where: str, message: str):
        self.problems.append(f"{where}: {message}")

    def take(self, table: dict, key: str, where: str, kind, default):
        if key not in table:
            return default
        value = table[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is int and isinstance(value, bool):
            self.add(f"{where}.{key}", "expected an integer")
            return default
        if not isinstance(value, kind):
            self.add(f"{where}.{key}", f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
            return default
        return value

    def unknown(self, table: dict, allowed: set[str], where: str):
        for key in table:
            if key not in allowed:
                self.add(f"{where}.{key}" if where else key, "unknown field")


def _train_config(table: dict, defaults: dict, where: str, col: _Collector, d: int, seed: int) -> TrainConfig:
    kwargs = dict(defaults)
    for key, attr in _TRAIN_KEYS.items():
        if key in table:
            kind = str if key == "bias_penalty" else int if key in ("max_epochs", "patience", "restarts") else float
            kwargs[attr] = col.take(table, key, where, kind, kwargs.get(attr))
    cfg = TrainConfig(d=d, seed=seed, **kwargs)
    for problem in cfg.validate():
        col.add(where, problem)
    return cfg


def parse_config(raw: dict, base_dir: Path | None = None) -> tuple[ExperimentConfig, list[str]]:
    """Build an :class:`ExperimentConfig`; returns it with every diagnostic found."""
    col = _Collector()
    col.unknown(raw, {"seed", "out", "data", "train", "models", "mds", "evaluate"}, "")
    seed = col.take(raw, "seed", "", int, 0)
    out = col.take(raw, "out", "", str, "run")

    d_raw = raw.get("data", {})
    col.unknown(d_raw, set(DataConfig.__dataclass_fields__) , "data")
    data = DataConfig()
    data.ratings = col.take(d_raw, "ratings", "data", str, data.ratings)
    data.format = col.take(d_raw, "format", "data", str, data.format)
    if data.format not in FORMATS:
        col.add("data.format", f"must be one of {', '.join(FORMATS)}")
    data.labels = col.take(d_raw, "labels", "data", str, data.labels)
    scale = col.take(d_raw, "scale", "data", list, list(data.scale))
    if len(scale) != 2 or not all(isinstance(v, (int, float)) for v in scale) or scale[0] > scale[1]:
        col.add("data.scale", "must be [min, max] with min <= max")
    else:
        data.scale = (float(scale[0]), float(scale[1]))
    data.min_item_ratings = col.take(d_raw, "min_item_ratings", "data", int, data.min_item_ratings)
    data.min_user_ratings = col.take(d_raw, "min_user_ratings", "data", int, data.min_user_ratings)
    for key in ("min_item_ratings", "min_user_ratings"):
        if getattr(data, key) < 0:
            col.add(f"data.{key}", "must be >= 0")
    data.label_cutoff = col.take(d_raw, "label_cutoff", "data", float, data.label_cutoff)
    if not 0 <= data.label_cutoff <= 1:
        col.add("data.label_cutoff", "must lie in [0, 1]")
    dedupe = col.take(d_raw, "dedupe", "data", str, "")
    if dedupe not in ("", "keep-last"):
        col.add("data.dedupe", "must be '' or 'keep-last'")
    data.dedupe = dedupe or None
    data.unknown_labels = col.take(d_raw, "unknown_labels", "data", str, data.unknown_labels)
    if data.unknown_labels not in ("skip", "fail"):
        col.add("data.unknown_labels", "must be 'skip' or 'fail'")

    t_raw = raw.get("train", {})
    col.unknown(t_raw, set(_TRAIN_KEYS) | {"kinds", "dims"}, "train")
    shared = {}
    for key, attr in _TRAIN_KEYS.items():
        if key in t_raw:
            kind = str if key == "bias_penalty" else int if key in ("max_epochs", "patience", "restarts") else float
            shared[attr] = col.take(t_raw, key, "train", kind, None)
    shared = {k: v for k, v in shared.items() if v is not None}

    models: list[ModelConfig] = []
    m_raw = raw.get("models")
    if m_raw is None:
        kinds = col.take(t_raw, "kinds", "train", list, ["SVD", "DELTA_SVD", "NNMF"])
        dims = col.take(t_raw, "dims", "train", list, [10, 50, 100])
        m_raw = [{"kind": k, "d": d} for k in kinds for d in dims]
    elif not isinstance(m_raw, list):
        col.add("models", "must be an array of tables")
        m_raw = []
    for n, entry in enumerate(m_raw):
        where = f"models[{n}]"
        if not isinstance(entry, dict):
            col.add(where, "must be a table")
            continue
        col.unknown(entry, {"id", "kind", "d", *_TRAIN_KEYS}, where)
        try:
            kind = ModelKind.parse(entry.get("kind", ""))
        except ValueError:
            col.add(f"{where}.kind", f"unknown model kind {entry.get('kind')!r}")
            continue
        d = entry.get("d")
        if not isinstance(d, int) or isinstance(d, bool) or d < 1:
            col.add(f"{where}.d", "must be a positive integer")
            continue
        mid = entry.get("id") or f"{FAMILY_NAMES[kind]}-{d}"
        cfg = _train_config(entry, shared, where, col, d, derive_seed(seed, "model", mid))
        models.append(ModelConfig(mid, kind.value, cfg))

    mds_raw = raw.get("mds", {})
    col.unknown(mds_raw, {"enabled", "lambda", "dims", "max_iter", "tolerance", "restarts"}, "mds")
    mds = MdsSettings()
    mds.enabled = col.take(mds_raw, "enabled", "mds", bool, mds.enabled)
    mds.lam = col.take(mds_raw, "lambda", "mds", float, mds.lam)
    if not mds.lam >= 0:
        col.add("mds.lambda", "lambda must be >= 0")
    dims = col.take(mds_raw, "dims", "mds", list, list(mds.dims))
    if not all(isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in dims):
        col.add("mds.dims", "must be positive integers")
    else:
        mds.dims = tuple(dims)
    mds.max_iter = col.take(mds_raw, "max_iter", "mds", int, mds.max_iter)
    mds.tolerance = col.take(mds_raw, "tolerance", "mds", float, mds.tolerance)
    mds.restarts = col.take(mds_raw, "restarts", "mds", int, mds.restarts)
    if mds.max_iter < 1:
        col.add("mds.max_iter", "must be >= 1")
    if not mds.tolerance > 0:
        col.add("mds.tolerance", "must be > 0")
    if mds.restarts < 1:
        col.add("mds.restarts", "must be >= 1")

    e_raw = raw.get("evaluate", {})
    col.unknown(e_raw, set(EvalSettings.__dataclass_fields__), "evaluate")
    ev = EvalSettings()
    classifiers = col.take(e_raw, "classifiers", "evaluate", list, list(ev.classifiers))
    parsed = []
    for n, cid in enumerate(classifiers):
        try:
            parsed.append(cl.parse_classifier(str(cid)).id)
        except ValueError as exc:
            col.add(f"evaluate.classifiers[{n}]", str(exc))
    if len(set(parsed)) != len(parsed):
        col.add("evaluate.classifiers", "duplicate classifier ids")
    ev.classifiers = tuple(parsed)
    ev.C = col.take(e_raw, "C", "evaluate", float, ev.C)
    ev.gamma = col.take(e_raw, "gamma", "evaluate", float, ev.gamma)
    if not ev.C > 0:
        col.add("evaluate.C", "must be > 0")
    if not ev.gamma > 0:
        col.add("evaluate.gamma", "must be > 0")
    ev.svm_standardize = col.take(e_raw, "svm_standardize", "evaluate", bool, ev.svm_standardize)
    ev.n_pairs = col.take(e_raw, "n_pairs", "evaluate", int, ev.n_pairs)
    if ev.n_pairs < 1:
        col.add("evaluate.n_pairs", "must be >= 1")
    ev.train_fraction = col.take(e_raw, "train_fraction", "evaluate", float, ev.train_fraction)
    ev.test_fraction = col.take(e_raw, "test_fraction", "evaluate", float, ev.test_fraction)
    for key in ("train_fraction", "test_fraction"):
        if not 0 < getattr(ev, key) < 1:
            col.add(f"evaluate.{key}", "must lie in (0, 1)")
    ev.test_of_remaining = col.take(e_raw, "test_of_remaining", "evaluate", bool, ev.test_of_remaining)
    ev.bold_threshold = col.take(e_raw, "bold_threshold", "evaluate", float, ev.bold_threshold)
    ev.genre_threshold = col.take(e_raw, "genre_threshold", "evaluate", float, ev.genre_threshold)

    ids = [m.id for m in models] + ([f"MDS-{d}" for d in mds.dims] if mds.enabled else [])
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        col.add("models", f"duplicate model ids: {', '.join(dup)}")
    if not ids:
        col.add("models", "no coordinate space configured")

    cfg = ExperimentConfig(data, models, mds, ev, seed, out, base_dir or Path.cwd())
    return cfg, col.problems


def load_config(path: str | Path) -> tuple[ExperimentConfig, list[str]]:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        return ExperimentConfig(), [f"{path}: file not found"]
    except tomllib.TOMLDecodeError as exc:
        return ExperimentConfig(), [f"{path}: {exc}"]
    return parse_config(raw, path.parent.resolve())


def validate(path: str | Path) -> list[str]:
    return load_config(path)[1]


def require_valid(path: str | Path) -> ExperimentConfig:
    cfg, problems = load_config(path)
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg
