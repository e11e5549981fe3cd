"""Approximate minimum degree ordering on a quotient graph.

A compact version of the Amestoy/Davis/Duff scheme: element absorption,
approximate external degrees, and supervariable detection (both up front
and among the variables touched by each pivot). Aggressive absorption of
elements whose pattern is covered by the new element is included; dense
row postponement is not.
"""
import heapq

import numpy as np
import scipy.sparse as sp


def _adjacency(A):
    A = sp.csr_matrix(A)
    A = (A + A.T).tocsr()
    n = A.shape[0]
    adj = []
    for i in range(n):
        nbrs = set(A.indices[A.indptr[i]:A.indptr[i + 1]].tolist())
        nbrs.discard(i)
        adj.append(nbrs)
    return adj


def amd_order(A):
    """Fill-reducing permutation for the symmetric sparsity pattern of ``A``.

    Returns an int64 array ``perm`` such that ``A[perm][:, perm]`` is the
    matrix to factorize.
    """
    adj = _adjacency(A)
    n = len(adj)
    if n == 0:
        return np.zeros(0, dtype=np.int64)

    # initial supervariables: identical closed neighbourhoods
    groups = {}
    for i in range(n):
        key = tuple(sorted(adj[i] | {i}))
        groups.setdefault(key, []).append(i)
    members = {}
    rep_of = np.empty(n, dtype=np.int64)
    for key, grp in groups.items():
        r = grp[0]
        members[r] = grp
        for i in grp:
            rep_of[i] = r
    nv = {r: len(g) for r, g in members.items()}

    var_adj = {}
    for r in members:
        var_adj[r] = {rep_of[j] for j in adj[r]} - {r}
    var_elem = {r: set() for r in members}
    elem_vars = {}

    deg = {r: sum(nv[j] for j in var_adj[r]) for r in members}
    heap = [(d, r) for r, d in deg.items()]
    heapq.heapify(heap)
    alive = set(members)
    remaining = n
    order = []

    while alive:
        d, p = heapq.heappop(heap)
        if p not in alive or d != deg[p]:
            continue
        alive.discard(p)
        remaining -= nv[p]
        order.extend(members[p])

        lp = set(var_adj[p])
        for e in var_elem[p]:
            lp |= elem_vars.pop(e)
        lp.discard(p)
        lp &= alive
        absorbed = var_elem[p]
        for e in absorbed:
            for i in list(lp):
                var_elem[i].discard(e)
        elem_vars[p] = lp
        lp_weight = sum(nv[i] for i in lp)

        for i in lp:
            var_adj[i] -= lp
            var_adj[i].discard(p)
            var_elem[i] -= absorbed
            var_elem[i].add(p)

        # |L_e \ L_p| for elements adjacent to the pivot's pattern
        wext = {}
        for i in lp:
            for e in var_elem[i]:
                if e == p:
                    continue
                if e not in wext:
                    wext[e] = sum(nv[j] for j in elem_vars[e])
                wext[e] -= nv[i]

        for e, w in wext.items():
            if w == 0:
                # covered by the new element
                for i in elem_vars.pop(e):
                    var_elem[i].discard(e)

        for i in lp:
            ext = lp_weight - nv[i]
            a_i = sum(nv[j] for j in var_adj[i])
            e_i = sum(wext[e] for e in var_elem[i] if e != p)
            newd = min(remaining - nv[i], deg[i] + ext, a_i + ext + e_i)
            deg[i] = max(newd, 0)

        # supervariables among the touched variables
        buckets = {}
        for i in lp:
            key = (frozenset(var_adj[i]), frozenset(var_elem[i]))
            buckets.setdefault(key, []).append(i)
        for grp in buckets.values():
            if len(grp) < 2:
                continue
            r = grp[0]
            for j in grp[1:]:
                members[r].extend(members.pop(j))
                nvj = nv.pop(j)
                nv[r] += nvj
                deg[r] -= nvj
                alive.discard(j)
                for e in var_elem[j]:
                    if e in elem_vars:
                        elem_vars[e].discard(j)
                for k in var_adj[j]:
                    var_adj[k].discard(j)
                del var_adj[j], var_elem[j]
            deg[r] = max(0, min(deg[r], remaining - nv[r]))

        for i in lp:
            if i in alive:
                heapq.heappush(heap, (deg[i], i))

    return np.asarray(order, dtype=np.int64)
