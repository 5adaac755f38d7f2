import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ratingspace.standardize import (
    CoordinateSpace,
    column_variances,
    export_space_csv,
    load_space,
    principal_axes,
    save_space,
    standardize,
)


def same_up_to_sign(X, Y, rtol):
    signs = np.sign(np.sum(X * Y, axis=0))
    return np.max(np.abs(X - Y * signs)) <= rtol * np.max(np.abs(X))


def dense_oracle(A, B):
    U, s, Vt = np.linalg.svd(A @ B, full_matrices=False)
    d = A.shape[1]
    return U[:, :d] * np.sqrt(s[:d]), np.sqrt(s[:d])[:, None] * Vt[:d], s[:d]


def test_matches_dense_svd_of_product(rng):
    A, B = rng.normal(size=(8, 3)), rng.normal(size=(3, 6))
    space, B1 = standardize(A, B)
    A0, B0, s0 = dense_oracle(A, B)
    assert np.allclose(space.column_scales, s0, rtol=1e-12)
    assert same_up_to_sign(space.coords, A0, 1e-10)
    assert same_up_to_sign(B1.T, B0.T, 1e-10)


def test_canonical_input_is_fixed_point(rng):
    A, B = rng.normal(size=(10, 4)), rng.normal(size=(4, 7))
    space, B1 = standardize(A, B)
    again, B2 = standardize(space.coords, B1)
    assert np.allclose(again.coords, space.coords, atol=1e-12)
    assert np.allclose(B2, B1, atol=1e-12)


def test_sign_convention_and_order(rng):
    space, _ = standardize(rng.normal(size=(12, 4)), rng.normal(size=(4, 9)))
    X = space.coords
    pivot = np.argmax(np.abs(X), axis=0)
    assert np.all(X[pivot, np.arange(4)] > 0)
    assert np.all(np.diff(space.column_scales) <= 0)
    assert np.allclose(np.sum(X**2, axis=0), space.column_scales, rtol=1e-12)


def test_orthogonal_columns(rng):
    space, _ = standardize(rng.normal(size=(20, 5)), rng.normal(size=(5, 30)))
    G = space.coords.T @ space.coords
    off = G - np.diag(np.diag(G))
    assert np.max(np.abs(off)) < 1e-8 * np.max(np.diag(G))


def test_rank_deficiency_warns(rng):
    a = rng.normal(size=(6, 1))
    A = np.hstack([a, 2 * a])
    with pytest.warns(RuntimeWarning, match="rank 1"):
        space, B1 = standardize(A, rng.normal(size=(2, 5)))
    assert space.d == 1 and B1.shape == (1, 5)


def test_repeated_singular_values_warn():
    with pytest.warns(RuntimeWarning, match="near-repeated"):
        standardize(np.eye(3), np.eye(3))


def test_bad_inputs():
    with pytest.raises(ValueError):
        standardize(np.ones((3, 2)), np.ones((3, 2)))
    with pytest.raises(ValueError):
        standardize(np.array([[np.nan]]), np.ones((1, 1)))


def test_variances():
    assert list(column_variances(CoordinateSpace([[1.0, 2.0]], [1.0, 1.0]))) == [0.0, 0.0]
    assert list(column_variances(CoordinateSpace([[3.0], [3.0], [3.0]], [1.0]))) == [0.0]
    assert list(column_variances(CoordinateSpace([[-1.0], [1.0]], [2.0]))) == [1.0]


def test_principal_axes_centered_and_ordered(rng):
    X = rng.normal(size=(40, 3)) * [1.0, 5.0, 2.0] + 7.0
    Y = principal_axes(X)
    assert np.allclose(Y.mean(axis=0), 0, atol=1e-12)
    v = Y.var(axis=0)
    assert np.all(np.diff(v) < 0)


def test_space_files(tmp_path, rng):
    space, _ = standardize(rng.normal(size=(5, 2)), rng.normal(size=(2, 4)), {"extractor": "SVD"}, list("abcde"))
    assert space.name == "SVD-2"
    save_space(space, tmp_path / "s.npz")
    back = load_space(tmp_path / "s.npz")
    assert np.array_equal(back.coords, space.coords) and list(back.item_ids) == list("abcde")
    assert back.provenance["extractor"] == "SVD"
    export_space_csv(space, tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "item_id,x0,x1" and rows[1].startswith("#scale,") and len(rows) == 7


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_property_idempotent(seed, d):
    rng = np.random.default_rng(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        space, B1 = standardize(rng.normal(size=(d + 4, d)), rng.normal(size=(d, d + 3)))
        again, B2 = standardize(space.coords, B1)
    scale = np.max(np.abs(space.coords))
    gaps = -np.diff(space.column_scales) / space.column_scales[:-1]
    if np.all(gaps > 1e-6):
        assert np.allclose(again.coords, space.coords, atol=1e-9 * scale)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_property_reconstruction(seed, d):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(9, d)), rng.normal(size=(d, 7))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        space, B1 = standardize(A, B)
    P = A @ B
    assert np.linalg.norm(space.coords @ B1 - P) / np.linalg.norm(P) < 1e-8
