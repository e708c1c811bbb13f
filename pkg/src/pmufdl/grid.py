"""Three-phase radial grid model, nodal admittance assembly and grid extensions.

The grid is a tree of three-phase nodes joined by series branches (lines or
transformers) with optional per-end shunt admittances.  Loads, generator
internal impedances and neutral-grounding paths are all linear elements and
are folded into a single nodal admittance matrix, so every network solve and
every measurement model works off the same Y.

Units are SI throughout: volts, amperes, ohms, siemens, henry, hertz.
Phasors are complex numbers at the grid frequency.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

NPHASES = 3
PHASE_NAMES = ("A", "B", "C")

#: Zero-sequence impedance of the neutral-grounding path (grounding
#: transformer) in ohms.  A "solid" grounding still sees this impedance; a
#: Petersen coil adds 3*(R_coil + j*omega*L) in series.
GROUNDING_ZERO_SEQ_IMPEDANCE = 1.0 + 3.0j

#: Quality factor of a Petersen coil: the coil's series resistance is
#: omega*L / Q.  The resulting wattmetric residual current is what keeps a
#: resonant-grounded fault observable.
PETERSEN_COIL_QUALITY = 25.0


class GridModelError(ValueError):
    """Invalid grid description or construction request."""


def _matrix3(value, what: str, *, require_symmetric: bool = True) -> np.ndarray:
    m = np.asarray(value, dtype=complex)
    if m.shape != (NPHASES, NPHASES):
        raise GridModelError(f"{what} must be a 3x3 matrix, got shape {m.shape}")
    if require_symmetric and not np.allclose(m, m.T, rtol=1e-9, atol=1e-12):
        raise GridModelError(f"{what} must be symmetric")
    m = m.copy()
    m.flags.writeable = False
    return m


def _vector3(value, what: str) -> np.ndarray:
    v = np.asarray(value, dtype=complex)
    if v.shape != (NPHASES,):
        raise GridModelError(f"{what} must be a length-3 phasor triplet")
    v = v.copy()
    v.flags.writeable = False
    return v


@dataclass(frozen=True)
class Grounding:
    """Neutral grounding path at a node: solid, Petersen coil or none."""

    kind: str
    inductance_h: float | None = None

    def __post_init__(self):
        if self.kind not in ("solid", "petersen", "none"):
            raise GridModelError(f"unknown grounding kind {self.kind!r}")
        if self.kind == "petersen":
            if self.inductance_h is None or self.inductance_h <= 0:
                raise GridModelError("petersen grounding needs a positive inductance")


@dataclass(frozen=True)
class Node:
    id: int
    name: str = ""
    monitored: bool = False
    kind: str = "real"
    grounding: Grounding | None = None

    def __post_init__(self):
        if self.kind not in ("real", "fake", "virtual"):
            raise GridModelError(f"node {self.id}: unknown kind {self.kind!r}")
        if self.kind in ("fake", "virtual") and self.monitored:
            raise GridModelError(f"node {self.id}: {self.kind} nodes are never monitored")


@dataclass(frozen=True)
class Branch:
    """Series element between two nodes with an optional shunt at each end."""

    id: int
    from_node: int
    to_node: int
    series_impedance: np.ndarray
    shunt_from: np.ndarray | None = None
    shunt_to: np.ndarray | None = None
    kind: str = "line"
    fault_hypothesis_eligible: bool = True

    def __post_init__(self):
        if self.from_node == self.to_node:
            raise GridModelError(f"branch {self.id}: from == to ({self.from_node})")
        if self.kind not in ("line", "transformer"):
            raise GridModelError(f"branch {self.id}: unknown kind {self.kind!r}")
        object.__setattr__(
            self, "series_impedance",
            _matrix3(self.series_impedance, f"branch {self.id} series_impedance"))
        for attr in ("shunt_from", "shunt_to"):
            val = getattr(self, attr)
            if val is None:
                val = np.zeros((NPHASES, NPHASES), dtype=complex)
                val.flags.writeable = False
                object.__setattr__(self, attr, val)
            else:
                object.__setattr__(self, attr, _matrix3(val, f"branch {self.id} {attr}"))

    def series_admittance(self) -> np.ndarray:
        try:
            return np.linalg.inv(self.series_impedance)
        except np.linalg.LinAlgError:
            raise GridModelError(
                f"branch {self.id}: singular series impedance") from None


@dataclass(frozen=True)
class Source:
    """EMF behind an internal impedance (slack equivalent or generator).

    The winding star point floats (ungrounded wye), so a source passes no
    zero-sequence current; ground paths exist only through node grounding
    and shunt elements.
    """

    node: int
    emf: np.ndarray
    internal_impedance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "emf", _vector3(self.emf, f"source at node {self.node} emf"))
        object.__setattr__(
            self, "internal_impedance",
            _matrix3(self.internal_impedance, f"source at node {self.node} impedance"))

    def admittance_block(self) -> np.ndarray:
        """Nodal admittance with the floating star point eliminated."""
        try:
            yw = np.linalg.inv(self.internal_impedance)
        except np.linalg.LinAlgError:
            raise GridModelError(
                f"source at node {self.node}: singular internal impedance") from None
        ones = np.ones(3)
        total = ones @ yw @ ones
        return yw - np.outer(yw @ ones, ones @ yw) / total

    def norton_injection(self) -> np.ndarray:
        return self.admittance_block() @ self.emf


@dataclass(frozen=True)
class Load:
    """Delta-connected load.

    ``delta_impedance[i, j]`` (i != j) is the impedance connected between
    phases i and j; a zero entry means no connection between that pair.
    The diagonal is ignored.
    """

    node: int
    delta_impedance: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "delta_impedance",
            _matrix3(self.delta_impedance, f"load at node {self.node} delta_impedance"))

    def admittance_block(self) -> np.ndarray:
        block = np.zeros((NPHASES, NPHASES), dtype=complex)
        for a in range(NPHASES):
            for b in range(a + 1, NPHASES):
                z = self.delta_impedance[a, b]
                if z == 0:
                    continue
                y = 1.0 / z
                block[a, a] += y
                block[b, b] += y
                block[a, b] -= y
                block[b, a] -= y
        return block


@dataclass(frozen=True)
class GridModel:
    """Immutable radial three-phase network.

    Node ids must be contiguous 1..n.  The branch graph must be a tree
    (m = n - 1, connected).  Safe to share across threads: all construction
    operations return new instances.
    """

    nodes: tuple[Node, ...]
    branches: tuple[Branch, ...]
    sources: tuple[Source, ...] = ()
    loads: tuple[Load, ...] = ()
    frequency: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(sorted(self.nodes, key=lambda nd: nd.id)))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "loads", tuple(self.loads))
        ids = [nd.id for nd in self.nodes]
        n = len(ids)
        if ids != list(range(1, n + 1)):
            raise GridModelError(f"node ids must be contiguous 1..{n}, got {ids}")
        if sum(1 for nd in self.nodes if nd.kind == "virtual") > 1:
            raise GridModelError("at most one virtual node per grid")
        branch_ids = [b.id for b in self.branches]
        if len(set(branch_ids)) != len(branch_ids):
            raise GridModelError("branch ids must be unique")
        pairs = set()
        for b in self.branches:
            for end in (b.from_node, b.to_node):
                if not 1 <= end <= n:
                    raise GridModelError(f"branch {b.id}: unknown node {end}")
            key = frozenset((b.from_node, b.to_node))
            if key in pairs:
                raise GridModelError(
                    f"parallel branches between nodes {b.from_node} and {b.to_node}")
            pairs.add(key)
        for elem, what in [(self.sources, "source"), (self.loads, "load")]:
            for e in elem:
                if not 1 <= e.node <= n:
                    raise GridModelError(f"{what} at unknown node {e.node}")
        self._check_tree()

    def _check_tree(self):
        n, m = len(self.nodes), len(self.branches)
        if m != n - 1:
            raise GridModelError(f"not radial: n={n} nodes need m={n - 1} branches, got {m}")
        if n == 1:
            return
        seen = {1}
        frontier = [1]
        adj = self.adjacency
        while frontier:
            cur = frontier.pop()
            for nxt in adj[cur]:
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        if len(seen) != n:
            raise GridModelError("branch graph is not connected")

    # -- topology helpers --------------------------------------------------

    @cached_property
    def adjacency(self) -> Mapping[int, tuple[int, ...]]:
        adj: dict[int, list[int]] = {nd.id: [] for nd in self.nodes}
        for b in self.branches:
            adj[b.from_node].append(b.to_node)
            adj[b.to_node].append(b.from_node)
        return {i: tuple(sorted(v)) for i, v in adj.items()}

    @cached_property
    def _node_index(self) -> Mapping[int, Node]:
        return {nd.id: nd for nd in self.nodes}

    @cached_property
    def _branch_index(self) -> Mapping[int, Branch]:
        return {b.id: b for b in self.branches}

    def node(self, node_id: int) -> Node:
        try:
            return self._node_index[node_id]
        except KeyError:
            raise GridModelError(f"unknown node id {node_id}") from None

    def branch(self, branch_id: int) -> Branch:
        try:
            return self._branch_index[branch_id]
        except KeyError:
            raise GridModelError(f"unknown branch id {branch_id}") from None

    def degree(self, node_id: int) -> int:
        return len(self.adjacency[node_id])

    def neighbors(self, node_id: int) -> tuple[int, ...]:
        return self.adjacency[node_id]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @cached_property
    def monitored_ids(self) -> tuple[int, ...]:
        return tuple(nd.id for nd in self.nodes if nd.monitored)

    @cached_property
    def leaf_ids(self) -> tuple[int, ...]:
        return tuple(nd.id for nd in self.nodes if self.degree(nd.id) == 1)

    def eligible_branches(self) -> tuple[Branch, ...]:
        return tuple(b for b in self.branches if b.fault_hypothesis_eligible)

    def branches_at(self, node_id: int) -> tuple[Branch, ...]:
        return tuple(b for b in self.branches if node_id in (b.from_node, b.to_node))

    @property
    def omega(self) -> float:
        return 2.0 * np.pi * self.frequency

    # -- derived grids ------------------------------------------------------

    def with_monitored(self, monitored_ids: Iterable[int]) -> "GridModel":
        """Return a copy with exactly the given real nodes monitored."""
        wanted = set(monitored_ids)
        unknown = wanted - {nd.id for nd in self.nodes}
        if unknown:
            raise GridModelError(f"unknown node ids in monitored set: {sorted(unknown)}")
        bad = [i for i in wanted if self.node(i).kind != "real"]
        if bad:
            raise GridModelError(f"only real nodes can be monitored: {sorted(bad)}")
        nodes = tuple(replace(nd, monitored=nd.id in wanted) for nd in self.nodes)
        return replace(self, nodes=nodes)

    def with_grounding(self, kind: str, inductance_h: float | None = None) -> "GridModel":
        """Switch the grounding kind at every node that has a grounding path."""
        grounding = None if kind == "none" else Grounding(kind, inductance_h)
        nodes = tuple(
            replace(nd, grounding=grounding) if nd.grounding is not None else nd
            for nd in self.nodes)
        return replace(self, nodes=nodes)

    def grounded_node_ids(self) -> tuple[int, ...]:
        return tuple(
            nd.id for nd in self.nodes
            if nd.grounding is not None and nd.grounding.kind != "none")


# ---------------------------------------------------------------------------
# admittance assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Admittance:
    """Nodal admittance matrix of a grid, indexed by (node, phase).

    ``matrix[3*(i-1) + p, 3*(k-1) + q]`` couples phase p of node i with
    phase q of node k.
    """

    matrix: np.ndarray
    node_ids: tuple[int, ...]

    def block(self, node_i: int, node_k: int) -> np.ndarray:
        i = self.node_ids.index(node_i)
        k = self.node_ids.index(node_k)
        return self.matrix[3 * i:3 * i + 3, 3 * k:3 * k + 3]


def _grounding_block(grounding: Grounding, omega: float) -> np.ndarray:
    """Zero-sequence-only grounding path as a 3x3 admittance block.

    The block passes no positive/negative-sequence current, so it does not
    load the grid in balanced operation.
    """
    z_n = 0.0 + 0.0j
    if grounding.kind == "petersen":
        xl = omega * grounding.inductance_h
        z_n = xl / PETERSEN_COIL_QUALITY + 1j * xl
    elif grounding.kind == "none":
        return np.zeros((NPHASES, NPHASES), dtype=complex)
    y0 = 1.0 / (GROUNDING_ZERO_SEQ_IMPEDANCE + 3.0 * z_n)
    return y0 * np.ones((NPHASES, NPHASES), dtype=complex) / 3.0


def build_admittance(grid: GridModel, *, series_only: bool = False) -> Admittance:
    """Assemble the full nodal admittance matrix of the linear network.

    Branch series admittances fill the off-diagonal blocks; per-end shunts,
    delta loads, source internal impedances and grounding paths add to the
    diagonal blocks.  With ``series_only`` every shunt-type contribution is
    skipped, which makes all row sums exactly zero.
    """
    n = grid.n_nodes
    Y = np.zeros((3 * n, 3 * n), dtype=complex)

    def sl(node_id: int) -> slice:
        return slice(3 * (node_id - 1), 3 * (node_id - 1) + 3)

    for b in grid.branches:
        ys = b.series_admittance()
        Y[sl(b.from_node), sl(b.from_node)] += ys
        Y[sl(b.to_node), sl(b.to_node)] += ys
        Y[sl(b.from_node), sl(b.to_node)] -= ys
        Y[sl(b.to_node), sl(b.from_node)] -= ys
        if not series_only:
            Y[sl(b.from_node), sl(b.from_node)] += b.shunt_from
            Y[sl(b.to_node), sl(b.to_node)] += b.shunt_to

    if not series_only:
        for load in grid.loads:
            Y[sl(load.node), sl(load.node)] += load.admittance_block()
        for src in grid.sources:
            Y[sl(src.node), sl(src.node)] += src.admittance_block()
        for nd in grid.nodes:
            if nd.grounding is not None:
                Y[sl(nd.id), sl(nd.id)] += _grounding_block(nd.grounding, grid.omega)

    Y.flags.writeable = False
    return Admittance(matrix=Y, node_ids=tuple(nd.id for nd in grid.nodes))


def source_injections(grid: GridModel) -> np.ndarray:
    """Norton-equivalent current injections of all sources, length 3n."""
    J = np.zeros(3 * grid.n_nodes, dtype=complex)
    for src in grid.sources:
        i0 = 3 * (src.node - 1)
        J[i0:i0 + 3] += src.norton_injection()
    return J


# ---------------------------------------------------------------------------
# virtual / fake node extensions
# ---------------------------------------------------------------------------

def extend_with_virtual_node(
    grid: GridModel,
    branch_id: int,
    position: float,
    *,
    node_kind: str = "virtual",
) -> GridModel:
    """Split a branch at ``position`` (fraction from the from-end) with a new
    non-monitored node.

    The two segments carry ``position * Z`` and ``(1 - position) * Z``; each
    per-end shunt stays on its original real end and the new node gets none,
    so the unfaulted extended grid is electrically identical to the original.
    The new node id is ``n + 1``; the segment branch ids are
    ``max_branch_id + 1`` (from-side) and ``max_branch_id + 2`` (to-side).
    """
    if not 0.0 < position < 1.0:
        raise GridModelError(f"position must be in (0, 1), got {position}")
    old = grid.branch(branch_id)
    if not old.fault_hypothesis_eligible:
        raise GridModelError(f"branch {branch_id} is not fault-hypothesis eligible")
    new_node_id = grid.n_nodes + 1
    next_branch = max(b.id for b in grid.branches) + 1
    vnode = Node(id=new_node_id, name=f"{node_kind}-{branch_id}",
                 monitored=False, kind=node_kind)
    half_from = Branch(
        id=next_branch, from_node=old.from_node, to_node=new_node_id,
        series_impedance=position * old.series_impedance,
        shunt_from=old.shunt_from, shunt_to=None,
        kind=old.kind, fault_hypothesis_eligible=old.fault_hypothesis_eligible)
    half_to = Branch(
        id=next_branch + 1, from_node=new_node_id, to_node=old.to_node,
        series_impedance=(1.0 - position) * old.series_impedance,
        shunt_from=None, shunt_to=old.shunt_to,
        kind=old.kind, fault_hypothesis_eligible=old.fault_hypothesis_eligible)
    branches = tuple(b for b in grid.branches if b.id != branch_id) + (half_from, half_to)
    return replace(grid, nodes=grid.nodes + (vnode,), branches=branches)


def virtual_node_id(grid: GridModel) -> int:
    """Id of the single virtual node of an extended grid."""
    for nd in grid.nodes:
        if nd.kind == "virtual":
            return nd.id
    raise GridModelError("grid has no virtual node")


@dataclass(frozen=True)
class FakeNodeEntry:
    original_branch: int
    fake_node: int
    half_from: int
    half_to: int


@dataclass(frozen=True)
class FakeNodeRegistry:
    """Mapping between fake midpoint nodes and the branches they split."""

    entries: tuple[FakeNodeEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    @cached_property
    def by_branch(self) -> Mapping[int, FakeNodeEntry]:
        return {e.original_branch: e for e in self.entries}

    @cached_property
    def by_fake_node(self) -> Mapping[int, FakeNodeEntry]:
        return {e.fake_node: e for e in self.entries}

    def original_branch_of(self, half_branch_id: int) -> int | None:
        for e in self.entries:
            if half_branch_id in (e.half_from, e.half_to):
                return e.original_branch
        return None


def add_fake_nodes(
    grid: GridModel, single_line_ufcs: Iterable[int]
) -> tuple[GridModel, FakeNodeRegistry]:
    """Split every given branch at its midpoint with a fake node.

    Every listed branch must join two monitored nodes.  The result is the
    fake-node extended grid used by the estimator bank.
    """
    entries = []
    current = grid
    for bid in sorted(set(single_line_ufcs)):
        b = grid.branch(bid)
        if not (grid.node(b.from_node).monitored and grid.node(b.to_node).monitored):
            raise GridModelError(
                f"branch {bid} joins a non-monitored node; "
                "only lines between two monitored nodes take fake nodes")
        fake_id = current.n_nodes + 1
        next_branch = max(br.id for br in current.branches) + 1
        current = extend_with_virtual_node(current, bid, 0.5, node_kind="fake")
        entries.append(FakeNodeEntry(
            original_branch=bid, fake_node=fake_id,
            half_from=next_branch, half_to=next_branch + 1))
    return current, FakeNodeRegistry(entries=tuple(entries))
