"""Command-line pipeline: ingest -> train -> standardize -> evaluate -> report.

Every stage writes self-describing snapshots carrying the hash of the
configuration that produced them; a rerun skips stages whose snapshots are
current unless ``--force`` is given.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
import traceback
from pathlib import Path
from typing import Callable

from . import config as C
from . import evaluate as ev
from . import factor, ingest, neighbor, standardize
from .errors import ConfigError, DataError, NumericalError

log = logging.getLogger("ratingspace")

STAGES = ("ingest", "train", "standardize", "evaluate", "report")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name.replace("δ", "delta"))


class EventLog:
    def __init__(self, path: Path):
        self.path = path

    def emit(self, event: str, **fields):
        record = {"time": round(time.time(), 3), "event": event, **fields}
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, ensure_ascii=False, default=str) + "\n")


def _snapshot_hash(path: Path) -> str | None:
    if not path.exists():
        return None
    try:
        if path.suffix == ".npz":
            return ingest.read_header(path).get("config_hash")
        return json.loads(path.read_text()).get("config_hash")
    except Exception:
        return None


class Pipeline:
    def __init__(self, cfg: C.ExperimentConfig, force: bool = False, threads: int = 1):
        self.cfg = cfg
        self.force = force
        self.threads = max(1, threads)
        self.out = cfg.out_dir
        self.out.mkdir(parents=True, exist_ok=True)
        for sub in ("models", "spaces", "evaluate", "report"):
            (self.out / sub).mkdir(exist_ok=True)
        self.events = EventLog(self.out / "events.jsonl")
        self._cache: dict[str, object] = {}

    # -- hashes --------------------------------------------------------------

    def h_ingest(self) -> str:
        return C.config_hash("ingest", dataclasses.asdict(self.cfg.data))

    def h_model(self, m: C.ModelConfig) -> str:
        return C.config_hash("train", self.h_ingest(), m.id, m.kind, dataclasses.asdict(m.train))

    def h_space(self, m: C.ModelConfig) -> str:
        return C.config_hash("standardize", self.h_model(m))

    def h_distances(self) -> str:
        return C.config_hash("distances", self.h_ingest(), self.cfg.mds.lam)

    def h_mds(self, d: int) -> str:
        mds = dataclasses.asdict(self.cfg.mds)
        mds.pop("dims")
        return C.config_hash("mds", self.h_distances(), mds, d, C.derive_seed(self.cfg.seed, "mds", str(d)))

    def space_ids(self) -> list[tuple[str, str]]:
        out = [(m.id, self.h_space(m)) for m in self.cfg.models]
        if self.cfg.mds.enabled:
            out += [(f"MDS-{d}", self.h_mds(d)) for d in self.cfg.mds.dims]
        return out

    def h_evaluate(self) -> str:
        return C.config_hash(
            "evaluate", self.space_ids(), dataclasses.asdict(self.cfg.evaluate), C.derive_seed(self.cfg.seed, "splits")
        )

    # -- paths ---------------------------------------------------------------

    @property
    def dataset_path(self) -> Path:
        return self.out / "dataset.npz"

    @property
    def labels_path(self) -> Path:
        return self.out / "labels.npz"

    def model_path(self, mid: str) -> Path:
        return self.out / "models" / f"{_slug(mid)}.npz"

    def space_path(self, sid: str) -> Path:
        return self.out / "spaces" / f"{_slug(sid)}.npz"

    @property
    def distances_path(self) -> Path:
        return self.out / "distances.npz"

    def _current(self, path: Path, h: str) -> bool:
        return not self.force and _snapshot_hash(path) == h

    # -- stages --------------------------------------------------------------

    def dataset(self):
        if "dataset" not in self._cache:
            if not self.dataset_path.exists():
                raise DataError("dataset snapshot missing; run the ingest stage first")
            self._cache["dataset"] = ingest.load_dataset(self.dataset_path)
            self._cache["labels"] = ingest.load_labels_snapshot(self.labels_path)
        return self._cache["dataset"]

    def labels(self):
        self.dataset()
        return self._cache["labels"]

    def stage_ingest(self) -> bool:
        h = self.h_ingest()
        if self._current(self.dataset_path, h) and self._current(self.labels_path, h):
            return False
        d = self.cfg.data
        ratings_path, labels_path = self.cfg.path(d.ratings), self.cfg.path(d.labels)
        for p in (ratings_path, labels_path):
            if not p.exists():
                raise DataError(f"input file not found: {p}")
        ds = ingest.parse_ratings(ratings_path, d.format, d.scale, d.dedupe)
        log.info("parsed %d ratings of %d items by %d users", ds.n, ds.n_items, ds.n_users)
        ds = ingest.filter_min_ratings(ds, d.min_item_ratings, d.min_user_ratings)
        log.info("after filtering: %d ratings, %d items, %d users", ds.n, ds.n_items, ds.n_users)
        labels = ingest.parse_labels(labels_path, ds, d.label_cutoff, d.unknown_labels)
        log.info("labels: %s", ", ".join(f"{g} {100 * f:.1f}%" for g, f in zip(labels.labels, labels.frequencies)))
        ingest.save_dataset(ds, self.dataset_path, {"config_hash": h})
        ingest.save_labels_snapshot(labels, self.labels_path, {"config_hash": h})
        self._cache.update(dataset=ds, labels=labels)
        self.events.emit("dataset", n=ds.n, items=ds.n_items, users=ds.n_users, labels=list(labels.labels))
        return True

    def stage_train(self) -> bool:
        ran = False
        for m in self.cfg.models:
            h = self.h_model(m)
            path = self.model_path(m.id)
            if self._current(path, h):
                continue
            ds = self.dataset()
            t0 = time.time()
            f = factor.train(ds, m.kind, m.train)
            factor.save_factorization(f, path, {"config_hash": h, "id": m.id})
            factor.write_training_log(f, path.with_suffix(".log.csv"))
            self.events.emit("model", id=m.id, objective=f.history[-1][1], epochs=len(f.history) - 1, seconds=round(time.time() - t0, 2))
            ran = True
        if self.cfg.mds.enabled:
            ran |= self._train_mds()
        return ran

    def _train_mds(self) -> bool:
        todo = [d for d in self.cfg.mds.dims if not self._current(self.space_path(f"MDS-{d}"), self.h_mds(d))]
        if not todo:
            return False
        hd = self.h_distances()
        ds = self.dataset()
        if self._current(self.distances_path, hd):
            dm = neighbor.load_distance_matrix(self.distances_path)
        else:
            dm = neighbor.build_distance_matrix(ds, self.cfg.mds.lam)
            neighbor.save_distance_matrix(dm, self.distances_path, {"config_hash": hd})
            self.events.emit("distances", items=dm.n_items, missing_fraction=dm.missing_fraction)
        s = self.cfg.mds
        for d in todo:
            mcfg = neighbor.MdsConfig(s.max_iter, s.tolerance, s.restarts, C.derive_seed(self.cfg.seed, "mds", str(d)))
            space = neighbor.mds_embed(dm, d, mcfg, ds.item_ids)
            space = dataclasses.replace(space, provenance={**space.provenance, "name": f"MDS-{d}"})
            standardize.save_space(space, self.space_path(f"MDS-{d}"), {"config_hash": self.h_mds(d)})
            self.events.emit("space", id=f"MDS-{d}", stress=space.provenance["stress"])
        return True

    def stage_standardize(self) -> bool:
        ran = False
        for m in self.cfg.models:
            h = self.h_space(m)
            path = self.space_path(m.id)
            if self._current(path, h):
                continue
            mpath = self.model_path(m.id)
            if _snapshot_hash(mpath) != self.h_model(m):
                raise DataError(f"model {m.id} is missing or stale; run the train stage first")
            f = factor.load_factorization(mpath)
            family = C.FAMILY_NAMES[factor.ModelKind.parse(m.kind)]
            space, _ = standardize.standardize(
                f.A, f.B, {"extractor": family, "d": m.train.d, "name": m.id, "kind": m.kind}, self.dataset().item_ids
            )
            standardize.save_space(space, path, {"config_hash": h})
            standardize.export_space_csv(space, path.with_suffix(".csv"))
            self.events.emit("space", id=m.id, scales=[float(x) for x in space.column_scales[:3]])
            ran = True
        return ran

    def stage_evaluate(self) -> bool:
        h = self.h_evaluate()
        stage_file = self.out / "evaluate" / "stage.json"
        if self._current(stage_file, h) and (self.out / "evaluate" / "kappas.csv").exists():
            return False
        spaces = []
        for sid, sh in self.space_ids():
            path = self.space_path(sid)
            if _snapshot_hash(path) != sh:
                raise DataError(f"coordinate space {sid} is missing or stale; run train/standardize first")
            space = standardize.load_space(path)
            spaces.append(dataclasses.replace(space, provenance={**space.provenance, "name": sid}))
        e = self.cfg.evaluate
        labels = self.labels()
        plan = ev.make_splits(
            labels.n_items, e.n_pairs, C.derive_seed(self.cfg.seed, "splits"), e.train_fraction, e.test_fraction, e.test_of_remaining
        )
        report = ev.run_experiment(spaces, labels, plan, e.specs(), workers=self.threads)
        ev.write_report(report, self.out / "evaluate", e.bold_threshold, e.genre_threshold)
        stage_file.write_text(json.dumps({"config_hash": h, "spaces": report.spaces, "splits": len(plan)}, indent=1) + "\n")
        self.events.emit("evaluate", cells=len(report.cells), excluded=len(report.excluded()))
        return True

    def stage_report(self) -> bool:
        h = C.config_hash("report", self.h_evaluate())
        stage_file = self.out / "report" / "stage.json"
        if self._current(stage_file, h):
            return False
        if _snapshot_hash(self.out / "evaluate" / "stage.json") != self.h_evaluate():
            raise DataError("evaluation results missing or stale; run the evaluate stage first")
        report = ev.read_report(self.out / "evaluate")
        e = self.cfg.evaluate
        ev.write_report(report, self.out / "report", e.bold_threshold, e.genre_threshold)
        for name, table in ev.render_tables(report, e.bold_threshold, e.genre_threshold).items():
            if not name.startswith("genres-"):
                sys.stderr.write(f"\n{name}\n{table}")
        stage_file.write_text(json.dumps({"config_hash": h}) + "\n")
        return True

    def run(self, stages) -> None:
        runners: dict[str, Callable[[], bool]] = {
            "ingest": self.stage_ingest,
            "train": self.stage_train,
            "standardize": self.stage_standardize,
            "evaluate": self.stage_evaluate,
            "report": self.stage_report,
        }
        meta = {"started": time.strftime("%Y-%m-%dT%H:%M:%S"), "stages": {}}
        for stage in STAGES:
            if stage not in stages:
                continue
            t0 = time.time()
            self.events.emit("stage_start", stage=stage)
            log.info("stage %s", stage)
            try:
                ran = runners[stage]()
            except Exception as exc:
                self.events.emit("stage_failed", stage=stage, error=type(exc).__name__, message=str(exc))
                exc.stage = stage
                raise
            status = "done" if ran else "skipped"
            if not ran:
                log.info("stage %s up to date, skipped", stage)
            self.events.emit(f"stage_{status}", stage=stage, seconds=round(time.time() - t0, 2))
            meta["stages"][stage] = {"status": status, "seconds": round(time.time() - t0, 2)}
        meta["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        (self.out / "run_meta.json").write_text(json.dumps(meta, indent=1) + "\n")


def _parse_stages(text: str | None) -> tuple[str, ...]:
    if not text:
        return STAGES
    stages = tuple(s.strip() for s in text.split(",") if s.strip())
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stage(s) {', '.join(unknown)}; expected {', '.join(STAGES)}")
    return stages


def _error_record(out: Path | None, exc: BaseException, code: int):
    record = {
        "error": type(exc).__name__,
        "message": str(exc),
        "stage": getattr(exc, "stage", None),
        "exit_code": code,
    }
    sys.stderr.write(json.dumps(record, ensure_ascii=False) + "\n")
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(json.dumps(record, indent=1, ensure_ascii=False) + "\n")
        except OSError:
            pass


def cmd_run(args) -> int:
    out = None
    try:
        cfg = C.require_valid(args.config)
        if args.seed is not None:
            raw_models = [dataclasses.replace(m, train=dataclasses.replace(m.train, seed=C.derive_seed(args.seed, "model", m.id))) for m in cfg.models]
            cfg = dataclasses.replace(cfg, seed=args.seed, models=raw_models)
        if args.out:
            cfg = dataclasses.replace(cfg, out=str(Path(args.out).resolve()))
        if args.dedupe is not None or args.min_user_ratings is not None:
            data = dataclasses.replace(
                cfg.data,
                dedupe=args.dedupe or cfg.data.dedupe,
                min_user_ratings=cfg.data.min_user_ratings if args.min_user_ratings is None else args.min_user_ratings,
            )
            cfg = dataclasses.replace(cfg, data=data)
        out = cfg.out_dir
        stages = _parse_stages(args.stages)
        Pipeline(cfg, force=args.force, threads=args.threads).run(stages)
        (out / "error.json").unlink(missing_ok=True)
        return EXIT_OK
    except ConfigError as exc:
        _error_record(out, exc, EXIT_CONFIG)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        _error_record(out, exc, EXIT_DATA)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        _error_record(out, exc, EXIT_NUMERIC)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.debug("%s", traceback.format_exc())
        _error_record(out, exc, EXIT_DATA)
        return EXIT_DATA


def cmd_validate(args) -> int:
    problems = C.validate(args.config)
    for p in problems:
        print(p)
    if not problems:
        print(f"{args.config}: ok")
    return EXIT_OK if not problems else EXIT_CONFIG


def cmd_fetch(args) -> int:
    from .datasets import prepare_ml100k

    print(prepare_ml100k(args.dest, args.wheel))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ratingspace", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run pipeline stages")
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGES)}")
    r.add_argument("--force", action="store_true", help="recompute even if snapshots are current")
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--seed", type=int, help="override the master seed")
    r.add_argument("--out", help="override the output directory")
    r.add_argument("--dedupe", choices=["keep-last"], help="keep the last of duplicate (item, user) ratings")
    r.add_argument("--min-user-ratings", type=int, help="drop users with fewer ratings after the item filter")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="check a config file")
    v.add_argument("config", type=Path)
    v.set_defaults(func=cmd_validate)

    f = sub.add_parser("fetch-ml100k", help="prepare MovieLens 100K CSV files")
    f.add_argument("dest", nargs="?")
    f.add_argument("--wheel", help="local RecBole wheel to extract from")
    f.set_defaults(func=cmd_fetch)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
