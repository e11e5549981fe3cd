"""Compiled inner loops for the sparse Cholesky factorization and solves.

All routines take CSC arrays. The factor stores its diagonal as the first
entry of every column.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def etree(n, cp, ci):
    # cp/ci: upper triangle of the (permuted) matrix, column-wise
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(cp[k], cp[k + 1]):
            i = ci[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@njit(cache=True)
def _ereach(cp, ci, k, parent, s, w):
    n = parent.shape[0]
    top = n
    w[k] = k
    for p in range(cp[k], cp[k + 1]):
        i = ci[p]
        if i > k:
            continue
        ln = 0
        while w[i] != k:
            s[ln] = i
            ln += 1
            w[i] = k
            i = parent[i]
        while ln > 0:
            top -= 1
            ln -= 1
            s[top] = s[ln]
    return top


@njit(cache=True)
def column_counts(n, cp, ci, parent):
    counts = np.ones(n, dtype=np.int64)
    s = np.empty(n, dtype=np.int64)
    w = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(cp, ci, k, parent, s, w)
        for t in range(top, n):
            counts[s[t]] += 1
    return counts


@njit(cache=True)
def up_looking(n, cp, ci, cx, parent, lp, pivot_tol):
    """Numeric up-looking Cholesky. Returns (li, lx, bad_column)."""
    nnz = lp[n]
    li = np.empty(nnz, dtype=np.int64)
    lx = np.empty(nnz, dtype=np.float64)
    c = lp[:n].copy()
    s = np.empty(n, dtype=np.int64)
    w = np.full(n, -1, dtype=np.int64)
    x = np.zeros(n, dtype=np.float64)
    for k in range(n):
        top = _ereach(cp, ci, k, parent, s, w)
        x[k] = 0.0
        for p in range(cp[k], cp[k + 1]):
            if ci[p] <= k:
                x[ci[p]] += cx[p]
        d = x[k]
        x[k] = 0.0
        for t in range(top, n):
            i = s[t]
            lki = x[i] / lx[lp[i]]
            x[i] = 0.0
            for p in range(lp[i] + 1, c[i]):
                x[li[p]] -= lx[p] * lki
            d -= lki * lki
            p = c[i]
            c[i] += 1
            li[p] = k
            lx[p] = lki
        if d <= pivot_tol:
            return li, lx, k
        p = c[k]
        c[k] += 1
        li[p] = k
        lx[p] = np.sqrt(d)
    return li, lx, -1


@njit(cache=True)
def lower_solve(n, lp, li, lx, b):
    # in-place G y = b, b is (n, m)
    m = b.shape[1]
    for j in range(n):
        djj = lx[lp[j]]
        for c in range(m):
            b[j, c] /= djj
        for p in range(lp[j] + 1, lp[j + 1]):
            r = li[p]
            v = lx[p]
            for c in range(m):
                b[r, c] -= v * b[j, c]
    return b


@njit(cache=True)
def upper_solve(n, lp, li, lx, b):
    # in-place G^T x = b, b is (n, m)
    m = b.shape[1]
    for j in range(n - 1, -1, -1):
        for p in range(lp[j] + 1, lp[j + 1]):
            r = li[p]
            v = lx[p]
            for c in range(m):
                b[j, c] -= v * b[r, c]
        djj = lx[lp[j]]
        for c in range(m):
            b[j, c] /= djj
    return b


def _crc64_table():
    # ECMA-182 polynomial, reflected (the CRC-64/XZ variant)
    poly = np.uint64(0xC96C5795D7870F42)
    table = np.zeros(256, dtype=np.uint64)
    for i in range(256):
        c = np.uint64(i)
        for _ in range(8):
            if c & np.uint64(1):
                c = (c >> np.uint64(1)) ^ poly
            else:
                c = c >> np.uint64(1)
        table[i] = c
    return table


_CRC64_TABLE = _crc64_table()


@njit(cache=True)
def _crc64(data, table):
    crc = np.uint64(0xFFFFFFFFFFFFFFFF)
    for b in data:
        crc = table[(crc ^ np.uint64(b)) & np.uint64(0xFF)] ^ (crc >> np.uint64(8))
    return crc ^ np.uint64(0xFFFFFFFFFFFFFFFF)


def crc64(buf):
    """CRC-64/XZ of a bytes-like object."""
    return int(_crc64(np.frombuffer(bytes(buf), dtype=np.uint8), _CRC64_TABLE))
