"""Exhaustive reference solvers for the assignment problem.

Both return the same objective as :func:`fusedet.setdet.hungarian`: among
all matchings using only finite edges, the largest ones, and among those the
cheapest.  Costs are re-summed over the chosen pairs in row order so equal
assignments give bit-identical totals.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

_CHUNK = 200_000


@lru_cache(maxsize=64)
def injections(n: int, m: int) -> np.ndarray:
    """All ordered selections of ``n`` distinct columns out of ``m`` (P(m, n) rows)."""
    if n == 0:
        return np.zeros((1, 0), dtype=np.int8)
    rows = np.arange(m, dtype=np.int8)[:, None]
    cols = np.arange(m, dtype=np.int8)
    for _ in range(1, n):
        rep = np.repeat(rows, m, axis=0)
        nxt = np.tile(cols, len(rows))
        keep = ~(rep == nxt[:, None]).any(axis=1)
        rows = np.hstack([rep[keep], nxt[keep, None]])
    rows.setflags(write=False)
    return rows


def _canonical(cost: np.ndarray, pairs) -> float:
    total = 0.0
    for r, c in sorted(pairs):
        total += float(cost[r, c])
    return total


def exhaustive_assignment(cost) -> tuple[list[tuple[int, int]], float]:
    """Enumerate every injection of rows into columns."""
    C = np.asarray(cost, dtype=np.float64)
    n, m = C.shape
    if n > m:
        raise ValueError("more rows than columns")
    if n == 0:
        return [], 0.0
    perms = injections(n, m)
    finite = np.isfinite(C)
    Z = np.where(finite, C, 0.0)
    best_key = None
    best_row = None
    rows = np.arange(n)
    for start in range(0, len(perms), _CHUNK):
        block = perms[start : start + _CHUNK].astype(np.intp)
        fin = finite[rows, block]
        count = fin.sum(axis=1)
        vals = Z[rows, block]
        total = vals[:, 0].copy()
        for k in range(1, n):
            total += vals[:, k]
        top = count.max()
        cand = np.flatnonzero(count == top)
        i = cand[np.argmin(total[cand])]
        key = (-int(top), float(total[i]))
        if best_key is None or key < best_key:
            best_key, best_row = key, block[i]
    pairs = [(r, int(best_row[r])) for r in range(n) if finite[r, best_row[r]]]
    return pairs, _canonical(C, pairs)


def subset_dp_assignment(cost) -> tuple[list[tuple[int, int]], float]:
    """Dynamic programme over columns with the set of used rows as state.

    Visits every injection implicitly; practical for up to ~12 rows and any
    number of columns.
    """
    C = np.asarray(cost, dtype=np.float64)
    n, m = C.shape
    if n == 0:
        return [], 0.0
    full = 1 << n
    worst = (1, np.inf)
    # value: (-matched, cost); choice[j][mask] = row taken at column j or -1
    best = [worst] * full
    best[0] = (0, 0.0)
    choice = np.full((m, full), -2, dtype=np.int64)
    for j in range(m):
        nxt = list(best)
        for mask in range(full):
            if best[mask] == worst:
                continue
            if nxt[mask] == best[mask] and choice[j, mask] == -2:
                choice[j, mask] = -1
            cnt, val = best[mask]
            for r in range(n):
                bit = 1 << r
                if mask & bit or not np.isfinite(C[r, j]):
                    continue
                key = (cnt - 1, val + C[r, j])
                if key < nxt[mask | bit]:
                    nxt[mask | bit] = key
                    choice[j, mask | bit] = r
        for mask in range(full):
            if choice[j, mask] == -2 and nxt[mask] != worst:
                choice[j, mask] = -1
        best = nxt
    mask = min(range(full), key=lambda s: best[s])
    pairs = []
    for j in range(m - 1, -1, -1):
        r = int(choice[j, mask])
        if r >= 0:
            pairs.append((r, j))
            mask &= ~(1 << r)
    return sorted(pairs), _canonical(C, pairs)


def reference_assignment(cost, max_injections: int = 2_000_000) -> tuple[list[tuple[int, int]], float]:
    """Full enumeration when feasible, otherwise the subset dynamic programme."""
    C = np.asarray(cost, dtype=np.float64)
    n, m = C.shape
    count = 1
    for k in range(n):
        count *= m - k
    if count <= max_injections:
        return exhaustive_assignment(C)
    return subset_dp_assignment(C)
