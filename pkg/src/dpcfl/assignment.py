"""Per-BS resource-block matching solved with the Hungarian method."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import wireless

SENTINEL = 1e9


def solve_square(cost) -> list[int]:
    """Minimum-cost perfect matching on a square matrix.

    Shortest augmenting path with row/column potentials, O(n^3).
    Returns ``col_of_row``.
    """
    c = np.asarray(cost, dtype=np.float64)
    n = c.shape[0]
    if c.ndim != 2 or c.shape[1] != n:
        raise ValueError("cost matrix must be square")
    if n == 0:
        return []
    INF = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = c[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = [0] * n
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    return col_of_row


@dataclass
class AssignmentProblem:
    cost: np.ndarray  # padded square
    feasible: np.ndarray  # [n_candidates, n_rbs]
    users: list[int]  # candidate user id per row
    n_rbs: int

    def __post_init__(self):
        feasible_total = float(np.abs(self.cost[self.cost < SENTINEL]).sum())
        assert SENTINEL > feasible_total, "sentinel must dominate any feasible total"


def build_problem(bs: int, selected, n_samples, ch: "wireless.ChannelState",
                  alloc: np.ndarray, rate_req: float, available=None) -> AssignmentProblem:
    """Cost ``-X_i`` where RB ``n`` would give user ``i`` at least ``rate_req``.

    ``alloc`` holds RBs already fixed by other BSs; it is used for the
    interference each candidate would see.
    """
    sel = np.flatnonzero(np.asarray(selected))
    if available is not None:
        sel = np.array([i for i in sel if available[i]], dtype=np.int64)
    R = alloc.shape[2]
    feas = np.zeros((len(sel), R), dtype=bool)
    for row, i in enumerate(sel):
        for n in range(R):
            if alloc[:, bs, n].any():
                continue
            feas[row, n] = wireless.candidate_rate(i, bs, n, alloc, ch) >= rate_req
    size = max(len(sel), R)
    cost = np.zeros((size, size))
    for row, i in enumerate(sel):
        cost[row, :R] = np.where(feas[row], -float(n_samples[i]), SENTINEL)
    return AssignmentProblem(cost, feas, [int(i) for i in sel], R)


def solve_hungarian(p: AssignmentProblem) -> list[tuple[int, int]]:
    """Matched ``(user, rb)`` pairs, padded and infeasible cells dropped."""
    cols = solve_square(p.cost)
    out = []
    for row, user in enumerate(p.users):
        n = cols[row]
        if n < p.n_rbs and p.feasible[row, n]:
            out.append((user, n))
    return out


def allocate_all(actions: np.ndarray, n_samples, ch: "wireless.ChannelState", n_rbs: int,
                 rate_req: float, identities=None, bs_tasks=None):
    """Solve the per-BS matchings in BS index order.

    ``actions`` is the [B, U] binary selection. A user already taken by an
    earlier BS, or whose identity is not served by the BS, is unavailable.
    Returns the RB tensor ``r[U, B, R]`` and the association ``a[U, B]``.
    """
    actions = np.asarray(actions, dtype=np.int64)
    B, U = actions.shape
    alloc = np.zeros((U, B, n_rbs), dtype=np.int64)
    taken = np.zeros(U, dtype=bool)
    for b in range(B):
        available = ~taken
        if identities is not None and bs_tasks is not None:
            available = available & np.array([int(k) in bs_tasks[b] for k in identities])
        prob = build_problem(b, actions[b], n_samples, ch, alloc, rate_req, available)
        for user, n in solve_hungarian(prob):
            alloc[user, b, n] = 1
            taken[user] = True
    return alloc, alloc.sum(axis=2)


def unmet_actions(actions: np.ndarray, assoc: np.ndarray) -> np.ndarray:
    """Per user: selected by some BS's action but left without an RB there."""
    actions = np.asarray(actions)
    return ((actions.T == 1) & (assoc == 0)).any(axis=1)
