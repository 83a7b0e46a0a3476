import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcmlp.core import stream
from pcmlp.features import (ConcatFeatures, CustomFeatures, LinearFeatures, OneHotFeatures,
                            PolynomialFeatures, load_rff, one_hot, rff_new, save_rff)
from pcmlp.matrix_io import dumps, load_matrix, loads, save_matrix


def rbf(x, y, bw):
    return math.exp(-np.sum((x - y) ** 2) / (2 * bw**2))


# ---------------------------------------------------------------------------
# random Fourier features
# ---------------------------------------------------------------------------

def test_rff_is_deterministic_in_seed():
    a, b = rff_new(3, seed=5), rff_new(3, seed=5)
    assert np.array_equal(a.omega, b.omega) and np.array_equal(a.phase, b.phase)
    assert not np.array_equal(a.omega, rff_new(3, seed=6).omega)


def test_rff_default_dimension_is_twenty():
    assert rff_new(2).d == 20


def test_rff_inner_product_approximates_scaled_rbf_kernel():
    bw = 0.7
    x = np.array([0.1, -0.3])
    y = x + np.array([bw, 0.0])
    est = np.mean([rff_new(2, 512, bw, seed=s).transform(x)[0] @ rff_new(2, 512, bw, seed=s).transform(y)[0]
                   for s in range(50)])
    fmap = rff_new(2, 512, bw)
    assert est == pytest.approx(fmap.kernel_scale * rbf(x, y, bw), abs=0.02)


def test_rff_rejects_non_positive_bandwidth():
    with pytest.raises(ValueError):
        rff_new(2, bandwidth=0.0)


def test_rff_input_scale_divides_inputs():
    plain = rff_new(2, 16, seed=1)
    scaled = rff_new(2, 16, seed=1, input_scale=[2.0, 4.0])
    x = np.array([[0.6, -1.2]])
    assert np.allclose(scaled.transform(x), plain.transform(x / [2.0, 4.0]))


def test_rff_roundtrip(tmp_path):
    fmap = rff_new(3, 8, 0.5, seed=2, input_scale=[1.0, 2.0, 3.0])
    save_rff(tmp_path / "rff.txt", fmap)
    back = load_rff(tmp_path / "rff.txt")
    X = stream(0, "x").normal(size=(5, 3))
    assert np.array_equal(back.transform(X), fmap.transform(X))


def test_single_pair_call_matches_batch():
    fmap = rff_new(3, 8, seed=3)
    assert np.array_equal(fmap([0.1, 0.2], [0.3]), fmap.batch([[0.1, 0.2]], [[0.3]])[0])


# ---------------------------------------------------------------------------
# one-hot features
# ---------------------------------------------------------------------------

def test_one_hot_first_pair():
    assert np.array_equal(one_hot(0, 0, 2, 2), [1, 0, 0, 0])


def test_one_hot_distinct_pairs_are_orthogonal():
    vecs = [one_hot(s, a, 3, 2) for s in range(3) for a in range(2)]
    G = np.array(vecs) @ np.array(vecs).T
    assert np.array_equal(G, np.eye(6))


def test_one_hot_rejects_out_of_range():
    with pytest.raises(IndexError):
        one_hot(2, 0, 2, 2)
    with pytest.raises(IndexError):
        one_hot(0, -1, 2, 2)


def test_uniform_one_hot_covariance_is_scaled_identity():
    fmap = OneHotFeatures(2, 2)
    pairs = [(s, a) for s in range(2) for a in range(2)]
    cov = sum(np.outer(fmap(s, a), fmap(s, a)) for s, a in pairs) / 4
    assert np.array_equal(cov, np.eye(4) / 4)


def test_one_hot_covariance_is_diagonal_occupancy():
    d = stream(0, "occ").dirichlet(np.ones(6)).reshape(3, 2)
    Phi = OneHotFeatures(3, 2).matrix()
    cov = np.einsum("sa,sai,saj->ij", d, Phi, Phi)
    assert np.allclose(cov, np.diag(d.ravel()), atol=1e-15)


def test_one_hot_batch_matches_single_calls():
    fmap = OneHotFeatures(3, 2)
    S, A = np.array([0, 2, 1]), np.array([1, 0, 1])
    assert np.array_equal(fmap.batch(S, A), np.array([fmap(s, a) for s, a in zip(S, A)]))


# ---------------------------------------------------------------------------
# polynomial and other maps
# ---------------------------------------------------------------------------

def test_polynomial_monomials_and_corner_norm():
    fmap = PolynomialFeatures(2, [-1.0], [2.0])
    assert fmap.d == 3  # 1, x, x^2
    fmap2 = PolynomialFeatures(2, [-1.0, -1.0], [2.0, 1.0])
    assert fmap2.d == 6
    corner = fmap2.transform([[2.0, 1.0]])[0]
    assert np.linalg.norm(corner) == pytest.approx(1.0)


def test_composite_maps_have_unit_bounded_rows():
    big = CustomFeatures(lambda S, A: np.full((len(np.atleast_2d(S)), 3), 5.0), 3)
    cat = ConcatFeatures([LinearFeatures(1.0, 2), LinearFeatures(3.0, 2)], np.array([1.0, 2.0]))
    assert np.linalg.norm(big.batch([[0.0]], [[0.0]])) == pytest.approx(1.0)
    assert cat.d == 4
    assert np.linalg.norm(cat.batch([[9.0]], [[0.0]])[0]) <= 1 + 1e-12


def feature_maps():
    return {
        "rff": rff_new(3, 20, 0.5, seed=0),
        "one_hot": OneHotFeatures(5, 3),
        "polynomial": PolynomialFeatures(3, [-2.0, -1.0, -1.0], [2.0, 1.0, 1.0]),
        "linear": LinearFeatures(1.0, 3),
    }


@pytest.mark.parametrize("kind", ["rff", "one_hot", "polynomial", "linear"])
def test_feature_norm_at_most_one_on_random_inputs(kind):
    fmap = feature_maps()[kind]
    rng = stream(0, "norm", kind)
    n = 10_000
    if kind == "one_hot":
        Phi = fmap.batch(rng.integers(0, 5, n), rng.integers(0, 3, n))
    else:
        Phi = fmap.batch(rng.normal(scale=3.0, size=(n, 2)), rng.normal(scale=3.0, size=(n, 1)))
    assert np.all(np.linalg.norm(Phi, axis=1) <= 1 + 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.integers(0, 2**32 - 1))
def test_rff_norm_bound_property(x, seed):
    fmap = rff_new(3, 7, 0.3, seed=seed)
    assert np.linalg.norm(fmap.transform(np.array(x))) <= 1 + 1e-12


# ---------------------------------------------------------------------------
# matrix text format
# ---------------------------------------------------------------------------

def test_matrix_text_roundtrip_is_exact(tmp_path):
    M = stream(1, "mat").normal(size=(4, 3)) * 1e-3
    assert np.array_equal(loads(dumps(M)), M)
    save_matrix(tmp_path / "m.txt", M)
    assert np.array_equal(load_matrix(tmp_path / "m.txt"), M)
