import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedprotoid.numerics import (
    KernelSpec,
    kernel_gram,
    median_heuristic_bandwidth,
    mmd2,
    mmd2_grad_wrt_X,
    pairwise_sq_dist,
)

from .oracles import (
    central_diff,
    max_rel_err,
    median_bandwidth_sorted,
    mmd2_double_sum,
    sq_dist_loop,
)

KINDS = ["linear", "poly2", "gaussian"]


def _matrix(rows, cols):
    return arrays(np.float64, (rows, cols), elements=st.floats(-2, 2))


# ---------------------------------------------------------------- distances


def test_sq_dist_345():
    assert pairwise_sq_dist([[0, 0]], [[3, 4]]).tolist() == [[25.0]]


def test_sq_dist_diagonal_zero():
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.all(np.diag(pairwise_sq_dist(X, X)) == 0)


def test_sq_dist_matches_loop():
    rng = np.random.default_rng(0)
    X, Y = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(pairwise_sq_dist(X, Y), sq_dist_loop(X, Y), atol=1e-12)


def test_sq_dist_dimension_mismatch():
    with pytest.raises(ValueError, match="incompatible feature dimensions"):
        pairwise_sq_dist(np.zeros((2, 3)), np.zeros((2, 4)))


# ---------------------------------------------------------------- kernels


def test_gaussian_self_is_one():
    X = np.array([[0.3, -1.2]])
    assert kernel_gram(X, X, KernelSpec("gaussian", 0.7))[0, 0] == 1.0


def test_linear_orthogonal():
    assert kernel_gram([[1, 0]], [[0, 1]], KernelSpec("linear"))[0, 0] == 0.0


def test_poly2_offset_one():
    # x.y = 2
    assert kernel_gram([[1, 1]], [[1, 1]], KernelSpec("poly2", poly_offset=1.0))[0, 0] == 9.0


def test_kernel_rejects_bad_input():
    with pytest.raises(ValueError):
        kernel_gram([[np.nan, 0]], [[0, 0]], KernelSpec("linear"))
    with pytest.raises(ValueError):
        KernelSpec("gaussian", 0.0)


@pytest.mark.parametrize("kind", KINDS)
@settings(max_examples=30, deadline=None)
@given(X=_matrix(5, 3))
def test_gram_symmetric(kind, X):
    K = kernel_gram(X, X, KernelSpec(kind))
    np.testing.assert_allclose(K, K.T, atol=1e-12)


def test_gaussian_entries_in_unit_interval():
    rng = np.random.default_rng(3)
    K = kernel_gram(rng.normal(size=(6, 2)), rng.normal(size=(4, 2)), KernelSpec("gaussian"))
    assert np.all(K > 0) and np.all(K <= 1)


# ---------------------------------------------------------------- bandwidth


def test_median_single_pair():
    assert median_heuristic_bandwidth([[0, 0]], [[0, 2]]) == pytest.approx(2.0)


def test_median_all_identical_falls_back():
    X = np.ones((3, 2))
    assert median_heuristic_bandwidth(X, X) == 1.0


def test_median_matches_sorted_oracle():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(6, 2))
    assert median_heuristic_bandwidth(X[:2], X[2:]) == pytest.approx(
        median_bandwidth_sorted(X[:2], X[2:]), abs=1e-12
    )


def test_median_needs_two_rows():
    with pytest.raises(ValueError):
        median_heuristic_bandwidth(np.zeros((1, 2)), np.zeros((0, 2)))


# ---------------------------------------------------------------- mmd


def test_mmd_identical_is_zero():
    X = np.random.default_rng(0).normal(size=(5, 3))
    for kind in KINDS:
        assert abs(mmd2(X, X, KernelSpec(kind))) < 1e-12


@pytest.mark.parametrize("t", [0.0, 0.5, 1.7, 3.0])
def test_mmd_singletons_closed_form(t):
    val = mmd2([[0.0]], [[t]], KernelSpec("gaussian", 1.0))
    assert val == pytest.approx(2 - 2 * np.exp(-t * t / 2), abs=1e-14)


@pytest.mark.parametrize("kind", KINDS)
def test_mmd_matches_double_sum(kind):
    rng = np.random.default_rng(5)
    X, Y = rng.normal(size=(5, 3)), rng.normal(size=(7, 3))
    assert mmd2(X, Y, KernelSpec(kind)) == pytest.approx(mmd2_double_sum(X, Y, kind), abs=1e-10)


def test_mmd_empty_raises():
    with pytest.raises(ValueError):
        mmd2(np.zeros((0, 2)), np.zeros((3, 2)), KernelSpec("linear"))


@pytest.mark.parametrize("kind", KINDS)
@settings(max_examples=25, deadline=None)
@given(X=_matrix(4, 2), Y=_matrix(3, 2))
def test_mmd_symmetric_and_self_zero(kind, X, Y):
    k = KernelSpec(kind)
    assert abs(mmd2(X, Y, k) - mmd2(Y, X, k)) <= 1e-12
    assert mmd2(X, X, k) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(X=_matrix(4, 3), Y=_matrix(6, 3))
def test_gaussian_mmd_nonnegative(X, Y):
    assert mmd2(X, Y, KernelSpec("gaussian")) >= -1e-12


# ---------------------------------------------------------------- gradient


def _fd_check(kind, X, Y, bandwidth=None):
    k = KernelSpec(kind, bandwidth if bandwidth is not None else "median")
    k = k.resolve(X, Y)
    numeric = central_diff(lambda Z: mmd2(Z, Y, k), X)
    return max_rel_err(mmd2_grad_wrt_X(X, Y, k), numeric)


def test_grad_linear_at_equal_inputs():
    X = np.random.default_rng(2).normal(size=(3, 2))
    assert _fd_check("linear", X, X.copy()) < 1e-4


def test_grad_gaussian_random():
    rng = np.random.default_rng(8)
    assert _fd_check("gaussian", rng.normal(size=(4, 2)), rng.normal(size=(3, 2))) < 1e-4


def test_grad_zero_at_singleton_match():
    x = np.array([[0.4, -0.1]])
    g = mmd2_grad_wrt_X(x, x.copy(), KernelSpec("gaussian", 1.0))
    assert np.all(g == 0)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("seed", range(10))
def test_grad_matches_finite_differences(kind, seed):
    # uniform draws on [-2, 2]; adversarial exact-zero gradients are out of
    # reach of finite differences at this tolerance
    rng = np.random.default_rng(seed)
    m, n, d = rng.integers(1, 6), rng.integers(1, 6), rng.integers(1, 5)
    X, Y = rng.uniform(-2, 2, (m, d)), rng.uniform(-2, 2, (n, d))
    assert _fd_check(kind, X, Y) < 1e-4
