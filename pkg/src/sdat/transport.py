"""Exact minimum-cost matching between two equally sized histogram batches."""
from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass

import numpy as np

BRUTE_FORCE_MAX_N = 9
# Slack allowed when deciding that an edge is tight / two costs tie.
TIE_TOL = 1e-12


@dataclass(frozen=True)
class Assignment:
    """``sigma[i]`` is the target row matched to generated row i."""

    sigma: tuple[int, ...]
    cost: float

    def __post_init__(self):
        if sorted(self.sigma) != list(range(len(self.sigma))):
            raise ValueError(f"sigma is not a permutation: {self.sigma}")


def check_prob_batch(P, name="batch", atol=1e-9) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0 or P.shape[1] == 0:
        raise ValueError(f"{name} must be a nonempty 2-D array, got shape {P.shape}")
    if not np.all(np.isfinite(P)) or np.any(P < -atol):
        raise ValueError(f"{name} has negative or non-finite entries")
    bad = np.flatnonzero(np.abs(P.sum(axis=1) - 1.0) > atol)
    if bad.size:
        raise ValueError(f"{name} rows not on the simplex: {bad.tolist()}")
    return P


def l1_cost_matrix(P, U) -> np.ndarray:
    """``C[i, j] = sum_k |P[i, k] - U[j, k]|``."""
    P = np.asarray(P, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    if P.ndim != 2 or U.ndim != 2:
        raise ValueError("histogram batches must be 2-D")
    if P.shape != U.shape:
        raise ValueError(f"batch shapes differ: {P.shape} vs {U.shape}")
    return np.abs(P[:, None, :] - U[None, :, :]).sum(axis=-1)


def _check_square(C) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1] or C.shape[0] == 0:
        raise ValueError(f"cost matrix must be square and nonempty, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    return C


def _path_cost(C: np.ndarray, sigma) -> float:
    # fixed left-to-right accumulation so equal sigmas give bit-equal costs
    cost = 0.0
    for i, j in enumerate(sigma):
        cost += C[i, j]
    return float(cost)


def _hungarian(C: np.ndarray):
    """Shortest augmenting path with potentials, O(n^3).

    Returns (row_to_col, u, v) with ``C - u[:, None] - v[None, :] >= 0`` up to
    rounding and equality on the matched edges.
    """
    n = C.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.intp)  # owner[j]: 1-based row on column j, 0 if free
    way = np.zeros(n + 1, dtype=np.intp)
    Cp = np.zeros((n + 1, n + 1))
    Cp[1:, 1:] = C
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cur = Cp[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.intp)
    row_to_col[owner[1:] - 1] = np.arange(n)
    return row_to_col, u[1:], v[1:]


def _lex_smallest_matching(tight: list[list[int]], match: list[int]) -> list[int]:
    """Lexicographically smallest perfect matching in the tight-edge graph.

    ``match`` is any perfect matching using tight edges. Rows are fixed in
    order; row i moves to a smaller column j only if the row currently on j
    can be rerouted, through unfixed rows, to the column i gives up.
    """
    n = len(match)
    col_owner = [0] * n
    for i, j in enumerate(match):
        col_owner[j] = i
    for i in range(n):
        for j in tight[i]:
            if j == match[i]:
                break
            target = match[i]
            start = col_owner[j]
            if start < i:
                continue
            # BFS over rows > i: from a row, move to any tight column; the
            # column's owner continues the path until we reach `target`.
            prev = {start: None}
            queue = deque([start])
            found = None
            while queue and found is None:
                r = queue.popleft()
                for c in tight[r]:
                    if c == j:
                        continue
                    if c == target:
                        found = (r, c)
                        break
                    o = col_owner[c]
                    if o > i and o not in prev:
                        prev[o] = r
                        queue.append(o)
            if found is None:
                continue
            r, c = found
            while r is not None:
                old = match[r]
                match[r] = c
                col_owner[c] = r
                c = old
                r = prev[r]
            match[i] = j
            col_owner[j] = i
            break
    return match


def solve_assignment(C) -> Assignment:
    """Globally optimal permutation for a square cost matrix.

    Among optimal permutations the lexicographically smallest sigma is
    returned (ties judged on the dual-tight edges, slack ``TIE_TOL`` scaled by
    the matrix magnitude).
    """
    C = _check_square(C)
    n = C.shape[0]
    match, u, v = _hungarian(C)
    tol = TIE_TOL * max(1.0, float(np.abs(C).max())) * n
    reduced = C - u[:, None] - v[None, :]
    tight = [np.flatnonzero(reduced[i] <= tol).tolist() for i in range(n)]
    for i in range(n):
        if match[i] not in tight[i]:
            # rounding pushed a matched edge over tol; keep it usable
            tight[i] = sorted(tight[i] + [int(match[i])])
    sigma = _lex_smallest_matching(tight, [int(j) for j in match])
    return Assignment(tuple(sigma), _path_cost(C, sigma))


def solve_assignment_bruteforce(C) -> Assignment:
    """Exhaustive search over all permutations; n <= 9 only."""
    C = _check_square(C)
    n = C.shape[0]
    if n > BRUTE_FORCE_MAX_N:
        raise ValueError(f"brute force refused for n={n} > {BRUTE_FORCE_MAX_N}")
    perms = list(itertools.permutations(range(n)))  # lexicographic order
    costs = [_path_cost(C, s) for s in perms]
    best = min(costs)
    tol = TIE_TOL * max(1.0, float(np.abs(C).max())) * n
    for s, c in zip(perms, costs):
        if c <= best + tol:
            return Assignment(s, c)
    raise AssertionError("unreachable")


def match_histograms(P, U) -> Assignment:
    """Optimal L1 matching of generated histograms P to target histograms U."""
    return solve_assignment(l1_cost_matrix(P, U))
