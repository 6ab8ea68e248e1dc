import numpy as np
import pytest

from diffora.errors import DefinitenessError, DimensionError, ShapeError
from diffora.numerics import (
    SeededRng,
    gaussian_matrix,
    jacobi_eigenvalues,
    min_eigenvalue,
    sign_vector,
    solve_spd,
)

from oracles import bisect_min_eigenvalue, cofactor_det


def test_gaussian_scalar_deterministic():
    a = gaussian_matrix(1, 1, SeededRng(33))
    b = gaussian_matrix(1, 1, SeededRng(33))
    assert a[0, 0] == b[0, 0]


def test_gaussian_moments():
    m = gaussian_matrix(1000, 1000, SeededRng(5))
    assert abs(m.mean()) < 0.01
    assert abs(m.var() - 1.0) < 0.02


def test_gaussian_stream_is_shape_independent():
    a = gaussian_matrix(2, 3, SeededRng(17)).ravel()
    b = gaussian_matrix(3, 2, SeededRng(17)).ravel()
    assert np.array_equal(a, b)


def test_gaussian_zero_dimension_rejected():
    with pytest.raises(DimensionError):
        gaussian_matrix(0, 3, SeededRng(1))


def test_sign_vector_deterministic_and_binary():
    a = sign_vector(4, SeededRng(9))
    b = sign_vector(4, SeededRng(9))
    assert np.array_equal(a, b)
    assert a.shape == (4, 1)
    assert np.all(a * a == 1.0)


def test_sign_vector_concentration():
    s = sign_vector(10_000, SeededRng(2))
    assert abs(s.mean()) < 0.05


def test_sign_vector_empty_rejected():
    with pytest.raises(DimensionError):
        sign_vector(0, SeededRng(1))


def test_derive_gives_distinct_reproducible_streams():
    root = SeededRng(7)
    a = root.derive(3).normal(5)
    b = root.derive(4).normal(5)
    c = SeededRng(7).derive(3).normal(5)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, c)


def test_min_eigenvalue_identity():
    assert min_eigenvalue(np.eye(3)) == pytest.approx(1.0, abs=1e-12)


def test_min_eigenvalue_diagonal():
    assert min_eigenvalue(np.diag([2.0, 5.0, -1.0])) == pytest.approx(-1.0, abs=1e-12)


def test_min_eigenvalue_matches_bisection_oracle():
    rng = SeededRng(11)
    for _ in range(3):
        m = gaussian_matrix(8, 8, rng)
        m = 0.5 * (m + m.T)
        assert min_eigenvalue(m) == pytest.approx(bisect_min_eigenvalue(m), abs=1e-8)


def test_jacobi_multiset_matches_trace_and_det():
    rng = SeededRng(12)
    m = gaussian_matrix(6, 6, rng)
    m = 0.5 * (m + m.T)
    eig = jacobi_eigenvalues(m)
    assert np.sum(eig) == pytest.approx(np.trace(m), rel=1e-8)
    assert np.prod(eig) == pytest.approx(cofactor_det(m), rel=1e-8)


def test_jacobi_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        jacobi_eigenvalues(np.ones((2, 3)))
    asym = np.array([[1.0, 2.0], [0.5, 1.0]])
    with pytest.raises(ShapeError):
        jacobi_eigenvalues(asym)


def test_jacobi_symmetrizes_tiny_asymmetry():
    m = np.array([[2.0, 1.0], [1.0 + 5e-11, 2.0]])
    eig = jacobi_eigenvalues(m)
    assert eig[0] == pytest.approx(1.0, abs=1e-9)


def test_solve_spd_identity_and_scalar():
    x = solve_spd(np.eye(2), np.array([[3.0], [-1.0]]))
    assert np.array_equal(x, np.array([[3.0], [-1.0]]))
    x = solve_spd(np.array([[4.0]]), np.array([[8.0]]))
    assert x[0, 0] == pytest.approx(2.0, abs=1e-14)


def test_solve_spd_residual_bound():
    rng = SeededRng(13)
    a = gaussian_matrix(6, 6, rng)
    m = a @ a.T + 6.0 * np.eye(6)
    b = gaussian_matrix(6, 1, rng)
    x = solve_spd(m, b)
    assert np.max(np.abs(m @ x - b)) <= 1e-8 * np.max(np.abs(b))


def test_solve_spd_rejects_indefinite():
    m = np.diag([1.0, -2.0])
    with pytest.raises(DefinitenessError) as err:
        solve_spd(m, np.ones((2, 1)))
    assert err.value.eigenvalue == pytest.approx(-2.0, abs=1e-8)


def test_matmul_associativity_tolerance():
    rng = SeededRng(14)
    a = gaussian_matrix(8, 8, rng)
    b = gaussian_matrix(8, 8, rng)
    c = gaussian_matrix(8, 8, rng)
    lhs = (a @ b) @ c
    rhs = a @ (b @ c)
    scale = np.max(np.abs(a)) * np.max(np.abs(b)) * np.max(np.abs(c)) * 64
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * scale
