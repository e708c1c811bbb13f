"""Optimal PMU placement as an exact binary linear program.

Monitoring constraints: a non-monitored node must have all neighbors
monitored (row form A gamma >= f with A carrying degrees on the diagonal
and adjacency off it), and every leaf is forced monitored.  Costs are
either uniform (minimize the PMU count) or resolution-weighted (fork nodes
get cost n * degree so the optimizer leaves them unmonitored, maximizing
the number of fault clusters).

Instances are tiny (tens of nodes), so the solver is an in-repo depth-first
branch and bound with a deterministic lexicographic tie-break, certified by
an exhaustive oracle in the tests.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .grid import GridModel, GridModelError


class InfeasiblePlacementError(RuntimeError):
    """No binary assignment satisfies the constraints."""


@dataclass(frozen=True)
class PlacementProblem:
    """Binary program data over the grid nodes (ascending id order)."""

    A: np.ndarray
    f: np.ndarray
    c: np.ndarray
    forced_ones: frozenset[int]
    forced_split_nodes: frozenset[int]
    node_ids: tuple[int, ...]

    def __post_init__(self):
        n = len(self.node_ids)
        A = np.asarray(self.A, dtype=int)
        f = np.asarray(self.f, dtype=int)
        c = np.asarray(self.c, dtype=float)
        if A.shape != (n, n) or f.shape != (n,) or c.shape != (n,):
            raise ValueError("inconsistent problem dimensions")
        if np.any(c <= 0):
            raise ValueError("cost vector must be strictly positive")
        for arr in (A, f, c):
            arr.flags.writeable = False
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "c", c)

    @property
    def n(self) -> int:
        return len(self.node_ids)


@dataclass(frozen=True)
class PlacementSolution:
    gamma: tuple[int, ...]
    d: int
    cost: float
    optimal: bool
    node_ids: tuple[int, ...]
    r: int | None = None

    @property
    def monitored_ids(self) -> tuple[int, ...]:
        return tuple(i for i, g in zip(self.node_ids, self.gamma) if g == 1)


def build_problem(
    grid: GridModel,
    cost_option: str = "uniform",
    forced_split_nodes: Iterable[int] = (),
) -> PlacementProblem:
    """Assemble A, f and the cost vector for a grid.

    ``resolution`` costs penalize fork nodes with n * degree.  A forced-split
    fork keeps its penalty but drops the penalty of any adjacent fork to 1,
    so the designated fork can stay non-monitored while its neighbors take
    the PMUs.
    """
    if cost_option not in ("uniform", "resolution"):
        raise ValueError(f"unknown cost option {cost_option!r}")
    n = grid.n_nodes
    node_ids = tuple(nd.id for nd in grid.nodes)
    A = np.zeros((n, n), dtype=int)
    for i, nid in enumerate(node_ids):
        A[i, i] = grid.degree(nid)
        for j in grid.neighbors(nid):
            A[i, j - 1] = 1
    f = np.array([grid.degree(nid) for nid in node_ids], dtype=int)

    forced_split = frozenset(forced_split_nodes)
    for b in forced_split:
        if grid.degree(b) <= 2:
            raise GridModelError(
                f"forced-split node {b} is not a fork (degree {grid.degree(b)})")

    if cost_option == "uniform":
        c = np.ones(n, dtype=float)
    else:
        c = np.array(
            [1.0 if grid.degree(nid) <= 2 else float(n * grid.degree(nid))
             for nid in node_ids])
        for b in forced_split:
            for j in grid.neighbors(b):
                if grid.degree(j) > 2:
                    c[j - 1] = 1.0

    forced_ones = frozenset(nid for nid in node_ids if grid.degree(nid) == 1)
    return PlacementProblem(A=A, f=f, c=c, forced_ones=forced_ones,
                            forced_split_nodes=forced_split, node_ids=node_ids)


def _check_feasible(problem: PlacementProblem, gamma: np.ndarray) -> bool:
    if np.any(problem.A @ gamma < problem.f):
        return False
    for nid in problem.forced_ones:
        if gamma[problem.node_ids.index(nid)] != 1:
            return False
    return True


def solve_placement(problem: PlacementProblem) -> PlacementSolution:
    """Exact solve by depth-first branch and bound.

    Branches in ascending node id with the 0-value first, so the first
    incumbent at the optimal cost is the lexicographically smallest optimal
    gamma; the bound (committed cost plus cost of still-unassigned forced
    nodes) never prunes a subtree holding a cheaper solution.
    """
    n = problem.n
    A, f, c = problem.A, problem.f, problem.c
    forced = np.zeros(n, dtype=bool)
    for nid in problem.forced_ones:
        forced[problem.node_ids.index(nid)] = True

    best_gamma: np.ndarray | None = None
    best_cost = np.inf

    gamma = np.full(n, -1, dtype=int)

    # row slack bookkeeping: with unassigned treated as 1, how much can each
    # row still lose before it breaks
    ub_lhs = A @ np.ones(n, dtype=int)

    def descend(idx: int, cost: float, ub: np.ndarray):
        nonlocal best_gamma, best_cost
        if np.any(ub < f):
            return
        remaining_forced = sum(
            c[j] for j in range(idx, n) if forced[j])
        if cost + remaining_forced > best_cost or (
                cost + remaining_forced == best_cost and best_gamma is not None):
            return
        if idx == n:
            if cost < best_cost:
                best_cost = cost
                best_gamma = gamma[:n].copy()
            return
        choices = (1,) if forced[idx] else (0, 1)
        for val in choices:
            new_ub = ub if val == 1 else ub - A[:, idx]
            gamma[idx] = val
            descend(idx + 1, cost + c[idx] * val, new_ub)
            gamma[idx] = -1

    descend(0, 0.0, ub_lhs)
    if best_gamma is None:
        raise InfeasiblePlacementError("no feasible PMU placement exists")
    g = tuple(int(v) for v in best_gamma)
    return PlacementSolution(
        gamma=g, d=int(sum(g)), cost=float(best_cost), optimal=True,
        node_ids=problem.node_ids)


def exhaustive_oracle(problem: PlacementProblem) -> PlacementSolution:
    """Enumerate every assignment of the free variables (n <= 20).

    Uses the same lexicographic tie-break as the solver and certifies it.
    """
    n = problem.n
    if n > 20:
        raise ValueError(f"exhaustive oracle limited to n <= 20, got {n}")
    forced_idx = [problem.node_ids.index(i) for i in problem.forced_ones]
    free_idx = [i for i in range(n) if i not in set(forced_idx)]
    k = len(free_idx)
    count = 1 << k
    gammas = np.ones((count, n), dtype=np.int8)
    if k:
        bits = ((np.arange(count)[:, None] >> np.arange(k)[None, :]) & 1)
        gammas[:, free_idx] = bits.astype(np.int8)
    feasible = np.all(gammas @ problem.A.T >= problem.f, axis=1)
    if not feasible.any():
        raise InfeasiblePlacementError("no feasible PMU placement exists")
    gammas = gammas[feasible]
    costs = gammas @ problem.c
    best = costs.min()
    candidates = gammas[np.isclose(costs, best)]
    g = min(map(tuple, candidates.tolist()))
    return PlacementSolution(
        gamma=tuple(int(v) for v in g), d=int(sum(g)), cost=float(best),
        optimal=True, node_ids=problem.node_ids)


def place(
    grid: GridModel,
    cost_option: str = "uniform",
    forced_split_nodes: Iterable[int] = (),
) -> PlacementSolution:
    """Solve placement on a grid and attach the resulting cluster count."""
    from dataclasses import replace as dc_replace

    from .observability import compute_clusters

    problem = build_problem(grid, cost_option, forced_split_nodes)
    solution = solve_placement(problem)
    partition = compute_clusters(grid, solution.monitored_ids)
    return dc_replace(solution, r=partition.r)
