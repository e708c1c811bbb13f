"""Observability conditions and fault-cluster partitioning.

A fault hypothesis adds a non-monitored midpoint node to one line, so the
whole estimate bank is implementable only when every such extended grid
stays observable.  Faults inside one cluster of lines produce identical
weighted residuals and are mutually indistinguishable; clusters are cut at
non-monitored fork nodes (degree > 2), and the empirical equal-residual
oracle is the ground truth for that partition.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .grid import GridModel, GridModelError, add_fake_nodes, extend_with_virtual_node
from .estimation import build_measurement_model, ObservabilityError, RANK_RTOL
from .noise import NoiseParams


@dataclass(frozen=True)
class ConditionCheck:
    ok: bool
    violations: tuple[int, ...] = ()

    def __bool__(self) -> bool:
        return self.ok


def check_plain_observability(grid: GridModel,
                              monitored: Iterable[int] | None = None) -> ConditionCheck:
    """Sufficient condition for the plain (no virtual node) grid to be
    observable.

    A node of degree > 1 may be part of at most one non-monitored node among
    itself and its neighbors, and a non-monitored leaf must sit next to a
    monitored node.  Violating nodes are listed; the condition is sufficient
    only, so a False result does not prove unobservability.
    """
    mon = set(monitored) if monitored is not None else set(grid.monitored_ids)
    violations = []
    for nd in grid.nodes:
        neigh = grid.neighbors(nd.id)
        unmon = sum(1 for j in neigh if j not in mon)
        if len(neigh) > 1:
            if unmon + (0 if nd.id in mon else 1) > 1:
                violations.append(nd.id)
        elif len(neigh) == 1 and nd.id not in mon:
            if neigh[0] not in mon:
                violations.append(nd.id)
    return ConditionCheck(ok=not violations, violations=tuple(sorted(violations)))


def check_extended_observability(grid: GridModel,
                                 monitored: Iterable[int] | None = None) -> ConditionCheck:
    """Exact condition for every midpoint-virtual-node extension to be
    observable: no two adjacent non-monitored nodes, and every leaf
    monitored."""
    mon = set(monitored) if monitored is not None else set(grid.monitored_ids)
    violations = set()
    for b in grid.branches:
        if b.from_node not in mon and b.to_node not in mon:
            violations.update((b.from_node, b.to_node))
    for nd in grid.nodes:
        if grid.degree(nd.id) == 1 and nd.id not in mon:
            violations.add(nd.id)
    return ConditionCheck(ok=not violations, violations=tuple(sorted(violations)))


def rank_observability(grid: GridModel,
                       monitored: Iterable[int] | None = None,
                       rtol: float = RANK_RTOL) -> bool:
    """Numerical observability: H has full column rank 6n."""
    mon = tuple(sorted(monitored)) if monitored is not None else grid.monitored_ids
    if not mon:
        return False
    model = build_measurement_model(grid, mon, NoiseParams())
    sv = np.linalg.svd(model.H, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return False
    return int(np.sum(sv > rtol * sv[0])) == model.N


def single_line_ufcs(grid: GridModel,
                     monitored: Iterable[int] | None = None) -> frozenset[int]:
    """Eligible lines whose two endpoints are both monitored."""
    mon = set(monitored) if monitored is not None else set(grid.monitored_ids)
    return frozenset(
        b.id for b in grid.eligible_branches()
        if b.from_node in mon and b.to_node in mon)


@dataclass(frozen=True)
class Cluster:
    """A maximal set of branches whose fault hypotheses share one residual."""

    branches: frozenset[int]
    representative: int
    hypothesis_eligible: bool


@dataclass(frozen=True)
class ClusterPartition:
    """Fault clusters of a monitored grid.

    ``clusters`` covers every branch (transformer clusters carry no fault
    hypothesis but still count toward the localization resolution r);
    eligible branches are exactly the union of the hypothesis-eligible
    clusters.  Clusters are ordered by their smallest branch id.
    """

    clusters: tuple[Cluster, ...]
    separator_nodes: frozenset[int]
    single_line_ufcs: frozenset[int]
    oracle_wmrs: Mapping[int, np.ndarray] | None = None

    @property
    def r(self) -> int:
        return len(self.clusters)

    @property
    def eligible_clusters(self) -> tuple[Cluster, ...]:
        return tuple(c for c in self.clusters if c.hypothesis_eligible)

    def cluster_of(self, branch_id: int) -> Cluster:
        for c in self.clusters:
            if branch_id in c.branches:
                return c
        raise KeyError(f"branch {branch_id} is in no cluster")

    def eligible_label_of(self, branch_id: int) -> int | None:
        """1-based label of the hypothesis-eligible cluster holding a branch."""
        for label, c in enumerate(self.eligible_clusters, start=1):
            if branch_id in c.branches:
                return label
        return None

    def same_partition(self, other: "ClusterPartition") -> bool:
        """Equality of the hypothesis-eligible branch groupings."""
        mine = {c.branches for c in self.eligible_clusters}
        theirs = {c.branches for c in other.eligible_clusters}
        return mine == theirs


def _build_partition(grid: GridModel, groups: Iterable[frozenset[int]],
                     mon: set[int],
                     oracle_wmrs: Mapping[int, np.ndarray] | None = None
                     ) -> ClusterPartition:
    clusters = []
    for branches in groups:
        eligible = sorted(
            b for b in branches if grid.branch(b).fault_hypothesis_eligible)
        rep = eligible[0] if eligible else min(branches)
        clusters.append(Cluster(
            branches=frozenset(branches), representative=rep,
            hypothesis_eligible=bool(eligible)))
    clusters.sort(key=lambda c: min(c.branches))
    separators = frozenset(
        nd.id for nd in grid.nodes
        if nd.id not in mon and grid.degree(nd.id) > 2)
    return ClusterPartition(
        clusters=tuple(clusters),
        separator_nodes=separators,
        single_line_ufcs=single_line_ufcs(grid, mon),
        oracle_wmrs=oracle_wmrs)


def compute_clusters(grid: GridModel,
                     monitored: Iterable[int] | None = None) -> ClusterPartition:
    """Partition the branches into fault clusters.

    Separator nodes are the non-monitored forks (degree > 2).  Two branches
    share a cluster when they are connected through endpoints that are not
    separators; a branch incident to a separator belongs to the component on
    its other side.
    """
    mon = set(monitored) if monitored is not None else set(grid.monitored_ids)
    th = check_extended_observability(grid, mon)
    if not th.ok:
        raise ObservabilityError(
            "monitored set leaves some fault hypothesis unobservable; "
            f"offending nodes: {sorted(th.violations)}")
    separators = {
        nd.id for nd in grid.nodes
        if nd.id not in mon and grid.degree(nd.id) > 2}

    parent = {b.id: b.id for b in grid.branches}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for nd in grid.nodes:
        if nd.id in separators:
            continue
        incident = [b.id for b in grid.branches_at(nd.id)]
        for other in incident[1:]:
            union(incident[0], other)

    groups: dict[int, set[int]] = {}
    for b in grid.branches:
        groups.setdefault(find(b.id), set()).add(b.id)
    return _build_partition(grid, [frozenset(g) for g in groups.values()], mon)


def empirical_cluster_oracle(
    grid: GridModel,
    monitored: Iterable[int] | None = None,
    trials: int = 20,
    seed: int = 0,
    rtol: float = 1e-6,
) -> ClusterPartition:
    """Group branches by empirically equal weighted residuals.

    Builds the fake-node extended grid, evaluates the residual of every
    per-branch midpoint hypothesis on ``trials`` standard-normal measurement
    vectors (identity R), and merges branches whose residual vectors agree
    componentwise to ``rtol``.  This oracle is authoritative: where the
    graph-rule partition disagrees, the oracle defines correctness.
    """
    mon = set(monitored) if monitored is not None else set(grid.monitored_ids)
    th = check_extended_observability(grid, mon)
    if not th.ok:
        raise ObservabilityError(
            "monitored set leaves some fault hypothesis unobservable; "
            f"offending nodes: {sorted(th.violations)}")
    feg, registry = add_fake_nodes(grid, single_line_ufcs(grid, mon))
    eligible = sorted(b.id for b in grid.eligible_branches())
    mon_sorted = tuple(sorted(mon))
    D = 12 * len(mon_sorted)
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((trials, D))

    from dataclasses import replace as dc_replace

    from .estimation import WlsSolver

    wmrs: dict[int, np.ndarray] = {}
    failures: dict[int, str] = {}
    for bid in eligible:
        entry = registry.by_branch.get(bid)
        target = entry.half_from if entry is not None else bid
        hyp = extend_with_virtual_node(feg, target, 0.5)
        model = build_measurement_model(hyp, mon_sorted, NoiseParams())
        model = dc_replace(model, R_diag=np.ones(D))  # identity weighting
        try:
            solver = WlsSolver(model, context=f"hypothesis on branch {bid}")
        except ObservabilityError as exc:
            failures[bid] = str(exc)
            continue
        wmrs[bid] = solver.wmr_many(Z)
    if failures:
        raise ObservabilityError(
            "unobservable fault hypotheses despite the adjacency condition: "
            + "; ".join(f"branch {b}: {msg}" for b, msg in sorted(failures.items())))

    def close(a: np.ndarray, b: np.ndarray) -> bool:
        scale = np.maximum(np.abs(a), np.abs(b))
        return bool(np.all(np.abs(a - b) <= np.maximum(rtol * scale, 1e-9)))

    groups: list[set[int]] = []
    for bid in eligible:
        for g in groups:
            if close(wmrs[bid], wmrs[next(iter(g))]):
                g.add(bid)
                break
        else:
            groups.append({bid})

    return _build_partition(grid, [frozenset(g) for g in groups], mon,
                            oracle_wmrs=wmrs)
