"""Shared fixtures: the packaged benchmark and small synthetic grids."""
import numpy as np
import pytest

from pmufdl.grid import Branch, GridModel, Grounding, Load, Node, Source


def make_grid(edges, monitored=(), sources=(), loads=(), grounding=(),
              frequency=50.0, shunt_c=0.0, transformer_edges=(),
              ineligible=()):
    """Small test grid from an edge list.

    ``edges`` is a list of (branch_id, from, to); branch impedances are
    distinct diagonal matrices derived from the branch id so no two branches
    are electrically identical.
    """
    n = max(max(a, b) for _, a, b in edges)
    mon = set(monitored)
    ground = set(grounding)
    nodes = tuple(
        Node(id=i, name=f"n{i}", monitored=i in mon,
             grounding=Grounding("solid") if i in ground else None)
        for i in range(1, n + 1))
    branches = []
    omega = 2 * np.pi * frequency
    for bid, a, b in edges:
        z = (0.2 + 0.07 * bid) + 1j * (0.45 + 0.05 * bid)
        shunt = 1j * omega * shunt_c / 2 * np.eye(3) if shunt_c else None
        branches.append(Branch(
            id=bid, from_node=a, to_node=b,
            series_impedance=z * np.eye(3),
            shunt_from=shunt, shunt_to=shunt,
            kind="transformer" if (a, b) in transformer_edges else "line",
            fault_hypothesis_eligible=bid not in set(ineligible)))
    srcs = tuple(
        Source(node=i, emf=11547.0 * np.exp(1j * np.deg2rad([0, -120, 120])),
               internal_impedance=(0.5 + 3.0j) * np.eye(3))
        for i in sources)
    lds = tuple(
        Load(node=i, delta_impedance=_delta(3000.0 + 100.0 * i))
        for i in loads)
    return GridModel(nodes=nodes, branches=tuple(branches), sources=srcs,
                     loads=lds, frequency=frequency)


def _delta(zmag):
    z = zmag * np.exp(1j * 0.3)
    m = np.zeros((3, 3), dtype=complex)
    for a, b in ((0, 1), (1, 2), (0, 2)):
        m[a, b] = m[b, a] = z
    return m


def tree_grid_from_edges(nx_edges, monitored, n=None):
    """Grid from a networkx-style edge list (nodes may be 0-based)."""
    nodes = sorted({v for e in nx_edges for v in e})
    offset = 1 - min(nodes)
    edges = [(k + 1, a + offset, b + offset)
             for k, (a, b) in enumerate(sorted(tuple(sorted(e)) for e in nx_edges))]
    mon = [i + offset for i in monitored]
    return make_grid(edges, monitored=mon)


@pytest.fixture(scope="session")
def benchmark():
    from pmufdl.gridio import load_benchmark
    return load_benchmark()


@pytest.fixture(scope="session")
def case_b_monitored(benchmark):
    return benchmark.monitored_ids


@pytest.fixture()
def chain3_mum():
    """3-node chain, ends monitored, middle not."""
    return make_grid([(1, 1, 2), (2, 2, 3)], monitored=(1, 3), sources=(1,))


@pytest.fixture()
def star4():
    """Star with non-monitored center 1 and monitored leaves 2..4."""
    return make_grid([(1, 1, 2), (2, 1, 3), (3, 1, 4)],
                     monitored=(2, 3, 4), sources=(2,))
