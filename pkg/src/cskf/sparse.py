"""Sparse SPD assembly, Cholesky factorization and triangular solves.

The factor ``G`` satisfies ``G @ G.T == A[perm][:, perm]``. Callers hand
right-hand sides in the original (unpermuted) coordinates;
:func:`back_solve_transposed` permutes them on the way in and
:func:`forward_solve` un-permutes on the way out, so that

    forward_solve(G, back_solve_transposed(G, b)) == inv(A) @ b
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .amd import amd_order
from .errors import DimensionMismatch, FormatError, NotPositiveDefinite, NotSymmetric, VersionMismatch

log = logging.getLogger(__name__)

FACTOR_MAGIC = b"CSKF"
FACTOR_VERSION = 1
# warn when the factor is denser than this fraction of a full triangle
DENSITY_WARNING = 0.25


@dataclass(frozen=True)
class SparseSymmetric:
    """Upper-triangle triplets of a symmetric matrix; duplicates are summed."""

    dim: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    @classmethod
    def from_triplets(cls, dim, rows, cols, vals):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if rows.size and (rows.min() < 0 or cols.min() < 0 or max(rows.max(), cols.max()) >= dim):
            raise DimensionMismatch("triplet index out of range")
        keep = rows <= cols
        return cls(int(dim), rows[keep], cols[keep], vals[keep])

    @classmethod
    def from_matrix(cls, A):
        """From a dense array or scipy sparse matrix (upper triangle is used)."""
        if sp.issparse(A):
            T = sp.triu(sp.coo_matrix(A))
        else:
            A = np.asarray(A, dtype=float)
            if A.ndim != 2 or A.shape[0] != A.shape[1]:
                raise DimensionMismatch(f"expected a square matrix, got {A.shape}")
            T = sp.triu(sp.coo_matrix(A))
        return cls(T.shape[0], T.row.astype(np.int64), T.col.astype(np.int64), T.data.astype(float))

    def to_csc(self):
        """Full symmetric matrix as scipy CSC with duplicates summed."""
        U = sp.coo_matrix((self.vals, (self.rows, self.cols)), shape=(self.dim, self.dim)).tocsc()
        U.sum_duplicates()
        D = sp.diags(U.diagonal())
        return (U + U.T - D).tocsc()

    def to_dense(self):
        return self.to_csc().toarray()


@dataclass(frozen=True, eq=False)
class SparseLowerTriangular:
    """Lower-triangular Cholesky factor in compressed sparse column form."""

    dim: int
    col_ptr: np.ndarray
    row_idx: np.ndarray
    values: np.ndarray
    perm: np.ndarray

    def __post_init__(self):
        for name in ("col_ptr", "row_idx", "values", "perm"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def nnz(self):
        return int(self.col_ptr[-1])

    @property
    def nbytes(self):
        # 8-byte values and indices, as serialized
        return 8 * (2 * self.nnz + (self.dim + 1) + self.dim)

    @property
    def inverse_perm(self):
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.dim)
        return inv

    def validate(self):
        n = self.dim
        cp, ri, vals = self.col_ptr, self.row_idx, self.values
        if cp.shape != (n + 1,) or cp[0] != 0 or np.any(np.diff(cp) < 1):
            raise FormatError("col_ptr must start at 0 and hold a diagonal per column")
        if ri.shape != (cp[-1],) or vals.shape != (cp[-1],):
            raise FormatError("row_idx/values length must equal nnz")
        if np.any(ri < 0) or np.any(ri >= n):
            raise FormatError("row index out of range")
        if n and not np.array_equal(np.sort(self.perm), np.arange(n)):
            raise FormatError("perm is not a permutation")
        starts = cp[:-1]
        if np.any(ri[starts] != np.arange(n)) or np.any(vals[starts] <= 0):
            raise FormatError("every column must start with a positive diagonal")
        col_of = np.repeat(np.arange(n), np.diff(cp))
        if np.any(ri < col_of):
            raise FormatError("entry above the diagonal")
        inner = np.diff(ri) > 0
        same_col = col_of[1:] == col_of[:-1]
        if np.any(same_col & ~inner):
            raise FormatError("row indices must increase within a column")
        return self

    def to_scipy(self):
        return sp.csc_matrix((self.values, self.row_idx, self.col_ptr), shape=(self.dim, self.dim))

    def to_dense(self):
        return self.to_scipy().toarray()

    def hessian(self):
        """A = P^T G G^T P in original coordinates (dense; tests only)."""
        G = self.to_dense()
        A_perm = G @ G.T
        inv = self.inverse_perm
        return A_perm[np.ix_(inv, inv)]

    def to_bytes(self):
        n, nnz = self.dim, self.nnz
        head = FACTOR_MAGIC + struct.pack("<IQQ", FACTOR_VERSION, n, nnz)
        return b"".join([
            head,
            self.perm.astype("<u8").tobytes(),
            self.col_ptr.astype("<u8").tobytes(),
            self.row_idx.astype("<u8").tobytes(),
            self.values.astype("<f8").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, buf, offset=0):
        """Parse a serialized factor; returns ``(factor, bytes_consumed)``."""
        head = 4 + struct.calcsize("<IQQ")
        if len(buf) - offset < head:
            raise FormatError("truncated factor header")
        if bytes(buf[offset:offset + 4]) != FACTOR_MAGIC:
            raise FormatError("bad factor magic")
        version, n, nnz = struct.unpack_from("<IQQ", buf, offset + 4)
        if version != FACTOR_VERSION:
            raise VersionMismatch(f"factor version {version}, expected {FACTOR_VERSION}")
        need = head + 8 * (n + (n + 1) + nnz + nnz)
        if len(buf) - offset < need:
            raise FormatError("truncated factor payload")
        pos = offset + head

        def take(count, dtype):
            nonlocal pos
            arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
            pos += 8 * count
            return arr

        perm = take(n, "<u8").astype(np.int64)
        cp = take(n + 1, "<u8").astype(np.int64)
        ri = take(nnz, "<u8").astype(np.int64)
        vals = take(nnz, "<f8").astype(np.float64)
        if cp[-1] != nnz:
            raise FormatError("col_ptr[dim] != nnz")
        G = cls(int(n), cp, ri, vals, perm).validate()
        return G, need


def _as_csc(A):
    if isinstance(A, SparseSymmetric):
        return A.to_csc()
    if sp.issparse(A):
        return sp.csc_matrix(A)
    return sp.csc_matrix(np.asarray(A, dtype=float))


def cholesky(A, ordering="fill_reducing"):
    """Sparse Cholesky ``G G^T = P A P^T`` with an optional AMD ordering.

    ``ordering`` is ``"natural"``, ``"fill_reducing"`` or an explicit
    permutation (reused across matrices sharing one pattern). Raises
    :class:`NotPositiveDefinite` on a pivot at or below
    ``1e-12 * max(diag(A))``.
    """
    C = _as_csc(A)
    n = C.shape[0]
    if C.shape != (n, n):
        raise DimensionMismatch(f"expected square matrix, got {C.shape}")
    if not isinstance(ordering, str):
        perm = np.asarray(ordering, dtype=np.int64)
        if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
            raise DimensionMismatch("ordering is not a permutation of the matrix indices")
    elif ordering == "natural":
        perm = np.arange(n, dtype=np.int64)
    elif ordering == "fill_reducing":
        perm = amd_order(C)
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    if n == 0:
        return SparseLowerTriangular(0, np.zeros(1, np.int64), np.zeros(0, np.int64), np.zeros(0), perm)

    Cp = C[perm][:, perm]
    U = sp.triu(Cp).tocsc()
    U.sum_duplicates()
    U.sort_indices()
    cp = U.indptr.astype(np.int64)
    ci = U.indices.astype(np.int64)
    cx = U.data.astype(np.float64)

    diag = C.diagonal()
    pivot_tol = 1e-12 * max(float(np.max(diag)), 0.0) if n else 0.0

    parent = _kernels.etree(n, cp, ci)
    counts = _kernels.column_counts(n, cp, ci, parent)
    lp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=lp[1:])
    li, lx, bad = _kernels.up_looking(n, cp, ci, cx, parent, lp, pivot_tol)
    if bad >= 0:
        raise NotPositiveDefinite(int(perm[bad]))
    G = SparseLowerTriangular(n, lp, li, lx, perm)
    if n > 50 and G.nnz > DENSITY_WARNING * n * (n + 1) / 2:
        log.warning("Cholesky factor is dense: nnz=%d for dim=%d", G.nnz, n)
    return G


def _rhs(G, B):
    B = np.asarray(B, dtype=np.float64)
    vec = B.ndim == 1
    B2 = B.reshape(B.shape[0], -1)
    if B2.shape[0] != G.dim:
        raise DimensionMismatch(f"right-hand side has {B2.shape[0]} rows, factor dim is {G.dim}")
    return B2, vec


def back_solve_transposed(G, B):
    """Solve ``G X = P B`` for X (the ``J^T`` of a map update).

    ``B`` is given in original coordinates; the result lives in the
    factor's coordinates.
    """
    B2, vec = _rhs(G, B)
    X = np.ascontiguousarray(B2[G.perm])
    _kernels.lower_solve(G.dim, G.col_ptr, G.row_idx, G.values, X)
    return X[:, 0] if vec else X


def forward_solve(G, B):
    """Solve ``G^T Y = B`` and return ``P^T Y`` (original coordinates)."""
    B2, vec = _rhs(G, B)
    Y = np.array(B2, dtype=np.float64, order="C", copy=True)
    _kernels.upper_solve(G.dim, G.col_ptr, G.row_idx, G.values, Y)
    out = np.empty_like(Y)
    out[G.perm] = Y
    return out[:, 0] if vec else out


def solve(G, B):
    """``inv(A) @ B`` for the matrix ``A`` that ``G`` factors."""
    return forward_solve(G, back_solve_transposed(G, B))


def is_psd(M, tol):
    """Eigenvalue test: True iff ``min eig(M) >= -tol``.

    Raises :class:`NotSymmetric` if ``M`` is asymmetric beyond ``tol``.
    """
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return True
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got {M.shape}")
    asym = np.max(np.abs(M - M.T))
    if asym > tol:
        raise NotSymmetric(f"max |M - M^T| = {asym:.3e} exceeds tol {tol:.1e}")
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    return bool(w[0] >= -tol)
