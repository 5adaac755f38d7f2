import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_dataset
from oracles import dense_objective, fd_gradient, random_factorization
from ratingspace.errors import NumericalError
from ratingspace.factor import (
    Factorization,
    ModelKind,
    TrainConfig,
    export_factorization_csv,
    gradient,
    holdout_split,
    load_factorization,
    objective,
    predict,
    save_factorization,
    select_lambda,
    sse,
    train,
    write_training_log,
)
from ratingspace.ingest import from_triples


def one_rating(r):
    return from_triples([0], [0], [r], scale=(0.5, 5.0))


def test_sse_examples():
    ds = one_rating(4.0)
    f = Factorization(A=[[2.5]], B=[[1.0]], kind="SVD", lam=0.0)
    assert sse(ds, f) == 2.25


def test_sse_empty_and_perfect():
    empty = from_triples([], [], [])
    assert sse(empty, Factorization(A=np.zeros((0, 1)), B=np.zeros((1, 0)), kind="SVD", lam=0.0)) == 0.0
    ds = from_triples([0, 1], [0, 0], [2.0, 3.0])
    f = Factorization(A=[[2.0], [3.0]], B=[[1.0]], kind="SVD", lam=0.0)
    assert sse(ds, f) == 0.0


def test_predict_examples():
    f = Factorization(A=[[1.0, 2.0]], B=[[3.0], [-1.0]], kind="SVD", lam=0.0)
    assert predict(f, 0, 0) == 1.0
    g = Factorization(A=np.zeros((2, 2)), B=np.zeros((2, 3)), kind="DELTA_SVD", lam=0.0, mu=3.5)
    assert all(predict(g, i, u) == 3.5 for i in range(2) for u in range(3))
    h = Factorization(A=np.zeros((1, 2)), B=np.zeros((2, 1)), kind="NNMF", lam=0.0)
    assert predict(h, 0, 0) == 0.0
    with pytest.raises(IndexError):
        predict(f, 1, 0)


def test_objective_examples():
    ds = one_rating(1.0)
    f = Factorization(A=[[1.0]], B=[[1.0]], kind="SVD", lam=0.04)
    assert objective(ds, f) == pytest.approx(0.08, abs=1e-15)
    assert objective(ds, Factorization(A=[[1.0]], B=[[2.0]], kind="SVD", lam=0.0)) == sse(
        ds, Factorization(A=[[1.0]], B=[[2.0]], kind="SVD", lam=0.0)
    )


def test_objective_bias_only(rng):
    ds = random_dataset(rng, 6, 7)
    f = Factorization(A=np.zeros((6, 2)), B=np.zeros((2, 7)), kind="DELTA_SVD", lam=0.3, mu=ds.mean())
    assert objective(ds, f) == pytest.approx(float(np.sum((ds.values - ds.mean()) ** 2)), rel=1e-13)


@pytest.mark.parametrize("kind", ["SVD", "DELTA_SVD", "NNMF"])
@pytest.mark.parametrize("penalty", ["squared", "linear"])
def test_objective_matches_dense_loop(rng, kind, penalty):
    ds = random_dataset(rng, 7, 9)
    f = random_factorization(rng, ds, kind, 3, 0.07, penalty)
    assert objective(ds, f) == pytest.approx(dense_objective(ds, f), rel=1e-12)


@pytest.mark.parametrize("kind", ["SVD", "DELTA_SVD", "NNMF"])
def test_gradient_finite_differences(rng, kind):
    ds = random_dataset(rng, 5, 6, integer=False)
    f = random_factorization(rng, ds, kind, 2, 0.1)
    g = gradient(ds, f).flat()
    assert np.allclose(g, fd_gradient(ds, f), rtol=1e-6, atol=1e-6)


def test_gradient_linear_bias_penalty(rng):
    ds = random_dataset(rng, 5, 6, integer=False)
    f = random_factorization(rng, ds, "DELTA_SVD", 2, 0.2, "linear")
    assert np.allclose(gradient(ds, f).flat(), fd_gradient(ds, f), rtol=1e-6, atol=1e-6)


def test_gradient_zero_at_perfect_fit(rng):
    A, B = rng.normal(size=(4, 2)), rng.normal(size=(2, 5))
    ii, uu = np.nonzero(np.ones((4, 5)))
    ds = from_triples(ii, uu, (A @ B)[ii, uu], scale=(-100, 100))
    f = Factorization(A=A, B=B, kind="SVD", lam=0.0)
    assert np.max(np.abs(gradient(ds, f).flat())) < 1e-12


def test_gradient_sharding_agrees(rng):
    ds = random_dataset(rng, 9, 11)
    f = random_factorization(rng, ds, "DELTA_SVD", 3, 0.05)
    assert np.allclose(gradient(ds, f, shards=4).flat(), gradient(ds, f).flat(), rtol=1e-12, atol=1e-12)


def test_train_rank_one_recovery(rng):
    a, b = rng.uniform(0.5, 1.5, 12), rng.uniform(0.5, 1.5, 15)
    R = np.outer(a, b)
    ii, uu = np.nonzero(np.ones_like(R))
    ds = from_triples(ii, uu, R[ii, uu], scale=(0, 10))
    cfg = TrainConfig(d=1, lam=0.0, max_epochs=2000, tolerance=1e-14, patience=20, restarts=1)
    f = train(ds, "SVD", cfg)
    assert sse(ds, f) < 1e-6 * float(np.sum(R**2))


def test_train_is_deterministic(rng):
    ds = random_dataset(rng, 10, 12)
    cfg = TrainConfig(d=2, max_epochs=30, restarts=2, seed=7)
    f1, f2 = train(ds, "DELTA_SVD", cfg), train(ds, "DELTA_SVD", cfg)
    assert np.array_equal(f1.A, f2.A) and np.array_equal(f1.B, f2.B)
    assert np.array_equal(f1.item_bias, f2.item_bias)
    assert f1.history == f2.history


@pytest.mark.parametrize("kind", ["SVD", "DELTA_SVD", "NNMF"])
def test_train_objective_monotone(rng, kind):
    ds = random_dataset(rng, 15, 20)
    f = train(ds, kind, TrainConfig(d=3, max_epochs=80, restarts=1))
    objs = [h[1] for h in f.history]
    assert all(b <= a for a, b in zip(objs, objs[1:]))
    assert objs[-1] == pytest.approx(objective(ds, f), rel=1e-10)
    if kind == "NNMF":
        assert f.A.min() >= 0 and f.B.min() >= 0


def test_delta_svd_uses_training_mean(rng):
    ds = random_dataset(rng, 8, 8)
    f = train(ds, "DELTA_SVD", TrainConfig(d=2, max_epochs=5, restarts=1))
    assert f.mu == ds.mean()


def test_invalid_configs():
    ds = one_rating(3.0)
    with pytest.raises(ValueError, match="d must be"):
        train(ds, "SVD", TrainConfig(d=0))
    with pytest.raises(ValueError, match="lambda must be >= 0"):
        train(ds, "SVD", TrainConfig(lam=-1))
    with pytest.raises(ValueError):
        train(from_triples([], [], []), "SVD", TrainConfig())
    with pytest.raises(ValueError):
        ModelKind.parse("PCA")


def test_all_restarts_diverge(rng):
    ds = random_dataset(rng, 5, 5)
    cfg = TrainConfig(d=2, restarts=2, init_scale=1e300, max_epochs=3)
    with pytest.raises(NumericalError):
        train(ds, "SVD", cfg)


def test_holdout_and_lambda_selection(rng):
    from ratingspace.datasets import planted_ratings

    ds, _ = planted_ratings(60, 120, d=3, density=0.3, noise=0.5, seed=3)
    fit, held = holdout_split(ds, 0.2, seed=1)
    assert fit.n + held.n == ds.n and fit.n_items == ds.n_items
    best, scores = select_lambda(ds, "SVD", TrainConfig(d=3, restarts=1, max_epochs=60), grid=(0.0, 0.1, 5.0))
    assert set(scores) == {0.0, 0.1, 5.0}
    assert scores[best] == min(scores.values())


def test_snapshot_and_exports(tmp_path, rng):
    ds = random_dataset(rng, 6, 7)
    f = train(ds, "DELTA_SVD", TrainConfig(d=2, max_epochs=10, restarts=1))
    save_factorization(f, tmp_path / "m.npz", meta={"config_hash": "x"})
    g = load_factorization(tmp_path / "m.npz")
    assert np.array_equal(g.A, f.A) and np.array_equal(g.user_bias, f.user_bias)
    assert g.kind is ModelKind.DELTA_SVD and g.mu == f.mu and g.history == f.history
    write_training_log(f, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,objective,sse,step_scale" and len(lines) == len(f.history) + 1
    export_factorization_csv(f, ds, tmp_path / "csv")
    assert (tmp_path / "csv" / "items.csv").read_text().startswith("id,f0,f1,bias\n")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_property_sse_invariant_under_invertible_map(seed, d):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, 8, 9)
    A, B = rng.normal(size=(8, d)), rng.normal(size=(d, 9))
    M = rng.normal(size=(d, d)) + 2 * np.eye(d)
    if np.linalg.cond(M) > 1e3:
        return
    base = sse(ds, Factorization(A=A, B=B, kind="SVD", lam=0.0))
    moved = sse(ds, Factorization(A=A @ M, B=np.linalg.solve(M, B), kind="SVD", lam=0.0))
    assert moved == pytest.approx(base, rel=1e-10)
