import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kfnoise.errors import DimensionError, NotPositiveDefiniteError, SingularMatrixError
from kfnoise.numerics import RandomSource, cholesky_factor, gaussian_vector, rmse, solve_linear

from conftest import random_spd


def test_solve_identity_returns_rhs():
    B = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(solve_linear(np.eye(3), B), B)


def test_solve_diagonal():
    X = solve_linear([[2.0, 0.0], [0.0, 4.0]], [[2.0], [8.0]])
    np.testing.assert_allclose(X, [[1.0], [2.0]], rtol=0, atol=1e-15)


def test_solve_random_residual():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((5, 5)) + 5 * np.eye(5)
    B = rng.standard_normal((5, 3))
    X = solve_linear(A, B)
    assert np.max(np.abs(A @ X - B)) <= 1e-10 * np.max(np.abs(B))


def test_solve_needs_pivoting():
    X = solve_linear([[0.0, 1.0], [1.0, 0.0]], [3.0, 7.0])
    np.testing.assert_allclose(X, [7.0, 3.0])


def test_solve_singular():
    with pytest.raises(SingularMatrixError):
        solve_linear([[1.0, 2.0], [2.0, 4.0]], [[1.0], [1.0]])


def test_solve_shape_mismatch():
    with pytest.raises(DimensionError):
        solve_linear(np.eye(2), np.ones((3, 1)))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 6), seed=st.integers(0, 2**32 - 1))
def test_solve_inverse_property(n, seed):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, n)
    assert np.linalg.cond(A) < 1e6
    np.testing.assert_allclose(A @ solve_linear(A, np.eye(n)), np.eye(n), atol=1e-9)


def test_cholesky_examples():
    np.testing.assert_array_equal(cholesky_factor(np.eye(3)), np.eye(3))
    np.testing.assert_array_equal(cholesky_factor([[4.0]]), [[2.0]])
    L = cholesky_factor(np.diag([1e-5, 1e-3]))
    np.testing.assert_allclose(L, np.diag(np.sqrt([1e-5, 1e-3])), rtol=1e-14)
    np.testing.assert_allclose(L @ L.T, np.diag([1e-5, 1e-3]), rtol=1e-10)


def test_cholesky_rejects_indefinite_and_asymmetric():
    with pytest.raises(NotPositiveDefiniteError):
        cholesky_factor([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(NotPositiveDefiniteError, match="symmetric"):
        cholesky_factor([[1.0, 0.5], [0.0, 1.0]])


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 6), seed=st.integers(0, 2**32 - 1))
def test_cholesky_reconstruction_property(n, seed):
    A = random_spd(np.random.default_rng(seed), n)
    L = cholesky_factor(A)
    assert np.allclose(L, np.tril(L))
    np.testing.assert_allclose(L @ L.T, A, rtol=1e-10, atol=1e-10 * np.max(np.abs(A)))


def test_gaussian_zero_covariance():
    np.testing.assert_array_equal(gaussian_vector(RandomSource(1), np.zeros((2, 2))), np.zeros(2))


def test_gaussian_moments():
    z = RandomSource(7).normal(1_000_000)
    assert abs(z.mean()) <= 0.005
    assert abs(z.var() - 1.0) <= 0.01


def test_gaussian_vector_covariance():
    rng = RandomSource(3)
    cov = np.array([[2.0, 0.6], [0.6, 1.0]])
    draws = np.array([gaussian_vector(rng, cov) for _ in range(20000)])
    np.testing.assert_allclose(np.cov(draws.T), cov, atol=0.06)


def test_gaussian_repeatable():
    a = [gaussian_vector(RandomSource(42), np.eye(2)) for _ in range(2)]
    np.testing.assert_array_equal(a[0], a[1])


def test_streams_reproducible_and_distinct():
    a, b = RandomSource(11), RandomSource(11)
    np.testing.assert_array_equal(a.normal(10_000), b.normal(10_000))
    assert not np.array_equal(RandomSource(11).uniform(10), RandomSource(12).uniform(10))


def test_stream_is_counter_based():
    # drawing in blocks or all at once gives the same words
    a = RandomSource(5)
    blocks = np.concatenate([a.raw(3), a.raw(4)])
    np.testing.assert_array_equal(blocks, RandomSource(5).raw(7))


def test_splitmix64_reference_values():
    # first outputs of the reference SplitMix64 generator seeded with 0
    words = RandomSource(0).raw(3)
    assert [int(w) for w in words] == [
        0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F,
    ]


def test_uniform_open_interval_and_permutation():
    u = RandomSource(9).uniform(100_000)
    assert u.min() > 0.0 and u.max() < 1.0
    p = RandomSource(9).permutation(50)
    assert sorted(p.tolist()) == list(range(50))


def test_rmse():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([1.0, 1.0], [0.0, 0.0]) == 1.0
    # sqrt((9 + 16) / 2)
    assert rmse([3.0, 0.0], [0.0, 4.0]) == pytest.approx(np.sqrt(12.5), abs=1e-15)
    with pytest.raises(DimensionError):
        rmse([1.0], [1.0, 2.0])
