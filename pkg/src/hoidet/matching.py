"""Minimum-cost assignment of ground-truth instances to queries.

`hungarian` solves the rectangular assignment problem (G ground truths,
N >= G queries) exactly and, among all minimum-cost assignments, returns
the one whose pair sequence (ordered by ground-truth index) is
lexicographically smallest. The solver is the classic potentials +
shortest-augmenting-path formulation on the zero-padded square matrix;
the lexicographic pass fixes rows in order, using reduced costs to skip
columns that cannot be part of any optimal assignment and re-solving
the remainder only when several columns are tight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MatchingError(ValueError):
    pass


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (gt index, query index), ordered by gt index
    unmatched_queries: list[int]
    total_cost: float


def _solve_square(rows: list[list[float]]):
    """Exact square assignment; returns (col_of_row, u, v) with 0-based
    duals satisfying reduced cost >= 0 and tightness on matched edges."""
    n = len(rows)
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[j] = row matched to column j, 1-based, 0 = free
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = -1
            row = rows[i0 - 1]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = [0] * n
    for j in range(1, n + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _padded_solve(cost_rows: list[list[float]], g: int, n: int):
    """Solve the G x N problem padded with zero rows to N x N."""
    padded = [list(r) for r in cost_rows] + [[0.0] * n for _ in range(n - g)]
    return _solve_square(padded)


def _optimal_cost(cost_rows: list[list[float]], row_ids: list[int], col_ids: list[int]) -> float:
    if not row_ids:
        return 0.0
    sub = [[cost_rows[i][j] for j in col_ids] for i in row_ids]
    cols, _, _ = _padded_solve(sub, len(row_ids), len(col_ids))
    return sum(sub[i][cols[i]] for i in range(len(row_ids)))


def hungarian(cost) -> MatchResult:
    """Optimal assignment of each row (ground truth) to a distinct
    column (query); ties broken toward the lexicographically smallest
    pair sequence."""
    arr = np.asarray(cost, dtype=np.float64)
    if arr.ndim != 2:
        raise MatchingError(f"cost must be a matrix, got shape {arr.shape}")
    g, n = arr.shape
    if g > n:
        raise MatchingError(f"more ground truths ({g}) than queries ({n})")
    if not np.isfinite(arr).all():
        raise MatchingError("cost matrix has non-finite entries")
    if g == 0:
        return MatchResult(pairs=[], unmatched_queries=list(range(n)), total_cost=0.0)

    rows = arr.tolist()
    base_cols, u, v = _padded_solve(rows, g, n)
    base_cost = sum(rows[i][base_cols[i]] for i in range(g))
    scale = max(1.0, float(np.abs(arr).max()))
    tol_accept = 1e-11 * max(1.0, abs(base_cost))
    tol_edge = 1e-9 * scale

    free = list(range(n))
    chosen: list[int] = []
    fixed_cost = 0.0
    for gi in range(g):
        row = rows[gi]
        tight = [j for j in free if row[j] - u[gi] - v[j] <= tol_edge]
        pick = None
        if len(tight) == 1:
            # the only column any optimal assignment can use for this row
            pick = tight[0]
        else:
            rest_rows = list(range(gi + 1, g))
            for j in tight if tight else free:
                rest_cols = [c for c in free if c != j]
                total = fixed_cost + row[j] + _optimal_cost(rows, rest_rows, rest_cols)
                if total <= base_cost + tol_accept:
                    pick = j
                    break
            if pick is None:
                # numerical fallback: scan every free column
                for j in free:
                    rest_cols = [c for c in free if c != j]
                    total = fixed_cost + row[j] + _optimal_cost(rows, rest_rows, rest_cols)
                    if total <= base_cost + tol_accept:
                        pick = j
                        break
        if pick is None:  # cannot happen: some free column extends optimally
            raise MatchingError("internal error: no optimal column found")
        chosen.append(pick)
        free.remove(pick)
        fixed_cost += row[pick]

    total_cost = sum(rows[i][chosen[i]] for i in range(g))
    matched = set(chosen)
    return MatchResult(
        pairs=[(i, chosen[i]) for i in range(g)],
        unmatched_queries=[j for j in range(n) if j not in matched],
        total_cost=float(total_cost),
    )
