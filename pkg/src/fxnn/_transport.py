"""Exact min-cost transport kernel (successive shortest paths with Johnson
potentials) compiled with numba. Solves the uncapacitated transportation
problem on a dense cost matrix; exact up to float64 roundoff.

Settled nodes are never re-relaxed: with real-valued costs a roundoff-negative
reduced cost could otherwise rewrite a settled node's parent pointer and knot
the parent chain into a cycle.
"""

from __future__ import annotations

import os

import numpy as np
from numba import njit, prange

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the TBB on this image predates what numba wants; OpenMP is always present
    from numba import config as _numba_config

    _numba_config.THREADING_LAYER = "omp"

_INF = np.inf


@njit(cache=True)
def ssp_transport(sup_in, dem_in, cost):  # pragma: no cover - exercised via wrappers
    """Min-cost flow from sources (sup) to sinks (dem) under dense costs.

    Supplies and demands must balance. Returns (total_cost, flow matrix).
    """
    ns = sup_in.shape[0]
    nt = dem_in.shape[0]
    sup = sup_in.copy()
    dem = dem_in.copy()
    n = ns + nt
    flow = np.zeros((ns, nt))
    pot = np.zeros(n)
    dist = np.empty(n)
    done = np.empty(n, np.bool_)
    parent = np.empty(n, np.int64)

    total_remaining = 0.0
    for i in range(ns):
        total_remaining += sup[i]
    tol = 1e-15 * max(1.0, total_remaining)

    while total_remaining > tol:
        for a in range(n):
            dist[a] = _INF
            done[a] = False
            parent[a] = -1
        for i in range(ns):
            if sup[i] > tol:
                dist[i] = 0.0
        target = -1
        while True:
            best = -1
            bd = _INF
            for a in range(n):
                if not done[a] and dist[a] < bd:
                    bd = dist[a]
                    best = a
            if best < 0:
                break
            done[best] = True
            if best >= ns and dem[best - ns] > tol:
                target = best
                break
            if best < ns:
                i = best
                base = dist[i] + pot[i]
                for j in range(nt):
                    if not done[ns + j]:
                        nd = base + cost[i, j] - pot[ns + j]
                        if nd < dist[ns + j]:
                            dist[ns + j] = nd
                            parent[ns + j] = i
            else:
                j = best - ns
                base = dist[ns + j] + pot[ns + j]
                for i in range(ns):
                    if flow[i, j] > 0.0 and not done[i]:
                        nd = base - cost[i, j] - pot[i]
                        if nd < dist[i]:
                            dist[i] = nd
                            parent[i] = ns + j
        if target < 0:
            break
        dt = dist[target]
        for a in range(n):
            if done[a]:
                pot[a] += dist[a]
            else:
                pot[a] += dt
        amt = dem[target - ns]
        a = target
        while parent[a] >= 0:
            pa = parent[a]
            if not (pa < ns and a >= ns):
                if flow[a, pa - ns] < amt:
                    amt = flow[a, pa - ns]
            a = pa
        if sup[a] < amt:
            amt = sup[a]
        b = target
        while parent[b] >= 0:
            pb = parent[b]
            if pb < ns and b >= ns:
                flow[pb, b - ns] += amt
            else:
                flow[b, pb - ns] -= amt
            b = pb
        sup[b] -= amt
        dem[target - ns] -= amt
        total_remaining -= amt

    total = 0.0
    for i in range(ns):
        for j in range(nt):
            total += flow[i, j] * cost[i, j]
    return total, flow


@njit(cache=True)
def emd_cost(p, q, cost):  # pragma: no cover - exercised via wrappers
    """Transport cost between equal-mass distributions on a shared support.

    Shared mass min(p, q) stays in place (zero-cost under a metric ground
    distance), so only the signed excess is routed; the problem is compacted
    to its active support before the solve.
    """
    c = p.shape[0]
    src = np.empty(c, np.int64)
    tgt = np.empty(c, np.int64)
    ns = 0
    nt = 0
    for i in range(c):
        d = p[i] - q[i]
        if d > 0.0:
            src[ns] = i
            ns += 1
        elif d < 0.0:
            tgt[nt] = i
            nt += 1
    if ns == 0 or nt == 0:
        return 0.0
    sup = np.empty(ns)
    dem = np.empty(nt)
    sub = np.empty((ns, nt))
    for a in range(ns):
        sup[a] = p[src[a]] - q[src[a]]
        for b in range(nt):
            sub[a, b] = cost[src[a], tgt[b]]
    for b in range(nt):
        dem[b] = q[tgt[b]] - p[tgt[b]]
    total, _ = ssp_transport(sup, dem, sub)
    return total


@njit(cache=True, parallel=True)
def emd_cost_rows(P, Q, cost, rows):  # pragma: no cover - exercised via wrappers
    """emd_cost for selected row pairs of two sample matrices, in parallel."""
    out = np.empty(rows.shape[0])
    for k in prange(rows.shape[0]):
        r = rows[k]
        out[k] = emd_cost(P[r], Q[r], cost)
    return out
