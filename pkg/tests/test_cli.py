import json
from pathlib import Path

import pytest

from ratingspace import config as C
from ratingspace.cli import main
from ratingspace.datasets import write_planted_files

SMOKE = """
seed = 3
out = "run"

[data]
ratings = "ratings.csv"
format = "csv"
labels = "genres.csv"
min_item_ratings = 5
label_cutoff = 0.05

[train]
kinds = ["SVD", "DELTA_SVD", "NNMF"]
dims = [2, 4]
max_epochs = 40
restarts = 1

[mds]
dims = [2, 4]
max_iter = 100

[evaluate]
n_pairs = 3
"""


@pytest.fixture(scope="module")
def smoke_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("smoke")
    write_planted_files(d, n_items=200, n_users=300, d=4, seed=1)
    (d / "exp.toml").write_text(SMOKE)
    return d


def events(out):
    return [json.loads(line) for line in (out / "events.jsonl").read_text().splitlines()]


def test_ingest_stage_only(tmp_path):
    write_planted_files(tmp_path, n_items=60, n_users=80, d=3)
    (tmp_path / "exp.toml").write_text(SMOKE)
    assert main(["run", "--config", str(tmp_path / "exp.toml"), "--stages", "ingest"]) == 0
    out = tmp_path / "run"
    assert (out / "dataset.npz").exists() and (out / "labels.npz").exists()
    assert not any((out / "models").iterdir()) and not any((out / "spaces").iterdir())
    assert not (out / "report" / "kappas.csv").exists()


def test_full_run_then_resume(smoke_dir):
    cfg = str(smoke_dir / "exp.toml")
    assert main(["run", "--config", cfg]) == 0
    out = smoke_dir / "run"
    rep = out / "report"
    for name in ("kappas.csv", "means.csv", "genre_means.csv"):
        assert (rep / name).read_text().count("\n") > 1
    tables = {p.name for p in (rep / "tables").iterdir()}
    assert {"SVD.txt", "NNMF.txt", "MDS.txt", "genres-SVM-RBF.tsv"} <= tables
    assert len(list((out / "spaces").glob("*.npz"))) == 8
    first = (rep / "kappas.csv").read_bytes()

    n_before = len(events(out))
    assert main(["run", "--config", cfg]) == 0
    new = events(out)[n_before:]
    finished = [e for e in new if e["event"].startswith("stage_") and e["event"] != "stage_start"]
    assert finished and all(e["event"] == "stage_skipped" for e in finished)
    assert (rep / "kappas.csv").read_bytes() == first


def test_rerun_from_scratch_is_byte_identical(smoke_dir, tmp_path):
    cfg = str(smoke_dir / "exp.toml")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    for name in ("kappas.csv", "means.csv", "genre_means.csv"):
        assert (tmp_path / "again" / "report" / name).read_bytes() == (smoke_dir / "run" / "report" / name).read_bytes()


def test_changed_evaluation_settings_rerun_only_late_stages(smoke_dir, tmp_path):
    text = SMOKE.replace("n_pairs = 3", "n_pairs = 2")
    (smoke_dir / "exp2.toml").write_text(text)
    assert main(["run", "--config", str(smoke_dir / "exp2.toml")]) == 0
    log = events(smoke_dir / "run")
    last = {e["stage"]: e["event"] for e in log if e["event"] in ("stage_done", "stage_skipped")}
    assert last["train"] == "stage_skipped" and last["evaluate"] == "stage_done"


def test_validate_diagnostics(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('[mds]\nlambda = -1\n[evaluate]\nclassifiers = ["SVM-lin", "4NN-Eucl"]\n[data]\ncolour = 1\n')
    assert main(["validate", str(bad)]) == 1
    text = capsys.readouterr().out
    assert "mds.lambda: lambda must be >= 0" in text
    assert "evaluate.classifiers[1]" in text
    assert "data.colour: unknown field" in text


def test_shipped_configs_are_valid():
    root = Path(C.__file__).parent / "configs"
    for name in ("movielens10m.toml", "ml100k.toml"):
        assert C.validate(root / name) == []


def test_default_models_and_seeds():
    cfg, problems = C.parse_config({})
    assert problems == []
    assert [m.id for m in cfg.models] == [f"{f}-{d}" for f in ("SVD", "δ-SVD", "NNMF") for d in (10, 50, 100)]
    assert len({m.train.seed for m in cfg.models}) == 9
    assert C.derive_seed(0, "model", "SVD-10") == C.derive_seed(0, "model", "SVD-10")
    assert C.derive_seed(0, "model", "SVD-10") != C.derive_seed(1, "model", "SVD-10")


def test_exit_codes(tmp_path):
    (tmp_path / "c.toml").write_text('[train]\nlambda = -2\n')
    assert main(["run", "--config", str(tmp_path / "c.toml")]) == 1
    (tmp_path / "d.toml").write_text('out = "o"\n[data]\nratings = "missing.csv"\nformat = "csv"\n')
    assert main(["run", "--config", str(tmp_path / "d.toml")]) == 2
    record = json.loads((tmp_path / "o" / "error.json").read_text())
    assert record["exit_code"] == 2 and record["stage"] == "ingest"
    (tmp_path / "bad.csv").write_text("item,user,rating\n1,1,4\n1,1,5\n")
    (tmp_path / "e.toml").write_text('out = "o2"\n[data]\nratings = "bad.csv"\nformat = "csv"\n')
    assert main(["run", "--config", str(tmp_path / "e.toml")]) == 2
    assert main(["run", "--config", str(tmp_path / "e.toml"), "--stages", "ingest,bogus"]) == 1


def test_dedupe_flag(tmp_path):
    (tmp_path / "dup.csv").write_text("item,user,rating\n1,1,4\n1,1,5\n2,1,3\n")
    (tmp_path / "g.csv").write_text("item_id,label\n1,A\n2,B\n")
    (tmp_path / "e.toml").write_text('[data]\nratings = "dup.csv"\nlabels = "g.csv"\nformat = "csv"\nmin_item_ratings = 0\n')
    cfg = str(tmp_path / "e.toml")
    assert main(["run", "--config", cfg, "--stages", "ingest"]) == 2
    assert main(["run", "--config", cfg, "--stages", "ingest", "--dedupe", "keep-last"]) == 0
    from ratingspace.ingest import load_dataset

    ds = load_dataset(tmp_path / "run" / "dataset.npz")
    assert ds.n == 2 and ds.values[0] == 5.0
