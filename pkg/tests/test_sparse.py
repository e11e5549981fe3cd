import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from cskf import sparse
from cskf.amd import amd_order
from cskf.errors import DimensionMismatch, FormatError, NotPositiveDefinite, NotSymmetric, VersionMismatch
from cskf._kernels import crc64
from conftest import random_spd


@pytest.mark.parametrize("ordering", ["natural", "fill_reducing"])
def test_factor_reproduces_matrix(ordering):
    rng = np.random.default_rng(0)
    A = random_spd(60, rng)
    G = sparse.cholesky(A, ordering)
    G.validate()
    assert np.allclose(G.hessian(), A.toarray(), atol=1e-10)
    Ap = A.toarray()[np.ix_(G.perm, G.perm)]
    assert np.allclose(G.to_dense() @ G.to_dense().T, Ap, atol=1e-10)


def test_solves_match_dense_inverse():
    rng = np.random.default_rng(1)
    A = random_spd(40, rng)
    G = sparse.cholesky(A)
    B = rng.standard_normal((40, 3))
    Ainv = np.linalg.inv(A.toarray())
    assert np.allclose(sparse.solve(G, B), Ainv @ B, atol=1e-10)
    # J = G^-1 P b, then P^T G^-T J = A^-1 b
    X = sparse.back_solve_transposed(G, B)
    assert np.allclose(X.T @ X, B.T @ Ainv @ B, atol=1e-10)
    assert np.allclose(sparse.forward_solve(G, X), Ainv @ B, atol=1e-10)
    v = rng.standard_normal(40)
    assert sparse.solve(G, v).shape == (40,)


def test_identity_factor_is_diagonal():
    G = sparse.cholesky(sp.identity(100, format="csc"))
    assert G.nnz == 100
    assert np.allclose(G.values, 1.0)


def test_not_positive_definite_reports_column():
    A = np.diag([1.0, 2.0, -1.0, 4.0])
    with pytest.raises(NotPositiveDefinite) as ei:
        sparse.cholesky(A, "natural")
    assert ei.value.column == 2


def test_rhs_dimension_checked():
    G = sparse.cholesky(np.eye(3))
    with pytest.raises(DimensionMismatch):
        sparse.solve(G, np.ones(4))


def test_serialization_round_trip_and_errors():
    rng = np.random.default_rng(2)
    G = sparse.cholesky(random_spd(30, rng))
    buf = G.to_bytes()
    H, used = sparse.SparseLowerTriangular.from_bytes(buf)
    assert used == len(buf)
    assert np.array_equal(H.values, G.values) and np.array_equal(H.perm, G.perm)
    with pytest.raises(FormatError):
        sparse.SparseLowerTriangular.from_bytes(buf[:-8])
    with pytest.raises(FormatError):
        sparse.SparseLowerTriangular.from_bytes(b"XXXX" + buf[4:])
    bad = bytearray(buf)
    bad[4] = 9
    with pytest.raises(VersionMismatch):
        sparse.SparseLowerTriangular.from_bytes(bytes(bad))


def test_factor_arrays_are_read_only():
    G = sparse.cholesky(np.eye(3) * 2)
    with pytest.raises(ValueError):
        G.values[0] = 1.0


def test_is_psd():
    assert sparse.is_psd(np.diag([1.0, 0.0]), 1e-12)
    assert not sparse.is_psd(np.diag([1.0, -1e-6]), 1e-9)
    with pytest.raises(NotSymmetric):
        sparse.is_psd(np.array([[1.0, 1.0], [0.0, 1.0]]), 1e-9)


def test_symmetric_triplets_sum_duplicates():
    S = sparse.SparseSymmetric.from_triplets(3, [0, 0, 1, 2, 1], [0, 0, 2, 2, 0], [1.0, 1.0, 3.0, 5.0, 7.0])
    # the (1, 0) lower entry is dropped; upper triangle is authoritative
    assert np.allclose(S.to_dense(), [[2, 0, 0], [0, 0, 3], [0, 3, 5]])
    with pytest.raises(DimensionMismatch):
        sparse.SparseSymmetric.from_triplets(2, [0], [5], [1.0])


def test_amd_is_permutation_and_reduces_fill_on_arrow():
    n = 50
    A = sp.lil_matrix((n, n))
    A.setdiag(n + 1.0)
    A[0, :] = 1.0
    A[:, 0] = 1.0
    A[0, 0] = n + 1.0
    A = A.tocsc()
    p = amd_order(A)
    assert np.array_equal(np.sort(p), np.arange(n))
    natural = sparse.cholesky(A, "natural").nnz
    amd = sparse.cholesky(A, "fill_reducing").nnz
    assert natural == n * (n + 1) // 2
    assert amd == 2 * n - 1


def test_crc64_check_value():
    assert crc64(b"123456789") == 0x995DC9BBDF1939FA


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 40), seed=st.integers(0, 10_000), density=st.floats(0.02, 0.5))
def test_factorization_property(n, seed, density):
    rng = np.random.default_rng(seed)
    A = random_spd(n, rng, density=density, shift=0.5)
    G = sparse.cholesky(A)
    G.validate()
    assert np.allclose(G.hessian(), A.toarray(), atol=1e-9 * max(1.0, abs(A).max()))
    b = rng.standard_normal(n)
    assert np.allclose(A @ sparse.solve(G, b), b, atol=1e-8)


def test_explicit_permutation_reused():
    rng = np.random.default_rng(5)
    A = random_spd(30, rng)
    perm = amd_order(A)
    G = sparse.cholesky(A * 2.0, perm)
    assert np.array_equal(G.perm, perm)
    assert np.allclose(G.hessian(), 2.0 * A.toarray(), atol=1e-10)
    with pytest.raises(DimensionMismatch):
        sparse.cholesky(A, np.zeros(30, dtype=int))


def test_hand_factor_and_solves():
    G = sparse.cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]), "natural")
    assert np.allclose(G.to_dense(), [[2.0, 0.0], [1.0, np.sqrt(2.0)]])
    # G J^T = b by forward substitution: [2, 0]
    assert np.allclose(sparse.back_solve_transposed(G, np.array([[4.0], [2.0]])).ravel(), [2.0, 0.0])
    T = sparse.cholesky(sp.diags([2.0] * 50) - sp.diags([1.0] * 49, 1) - sp.diags([1.0] * 49, -1), "natural")
    assert T.nnz == 99
