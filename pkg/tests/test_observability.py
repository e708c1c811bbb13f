"""Observability conditions, cluster partitioning and the residual oracle."""
import itertools

import networkx as nx
import numpy as np
import pytest

from pmufdl.estimation import ObservabilityError
from pmufdl.grid import extend_with_virtual_node
from pmufdl.observability import (
    check_extended_observability, check_plain_observability, compute_clusters,
    empirical_cluster_oracle, rank_observability, single_line_ufcs,
)

from conftest import make_grid, tree_grid_from_edges


def chain(n, monitored):
    return make_grid([(k, k, k + 1) for k in range(1, n)], monitored=monitored)


# -- sufficient condition for the plain grid ----------------------------------

def test_plain_chain_single_gap():
    check = check_plain_observability(chain(3, (1, 3)))
    assert check.ok and check.violations == ()


def test_plain_chain_double_gap():
    check = check_plain_observability(chain(4, (1, 4)))
    assert not check.ok
    assert check.violations == (2, 3)


def test_plain_star_center_gap(star4):
    assert check_plain_observability(star4).ok


def test_plain_unmonitored_leaf_needs_monitored_neighbor():
    check = check_plain_observability(chain(3, (3,)))
    # node 1 is an unmonitored leaf next to unmonitored node 2
    assert not check.ok and 1 in check.violations


# -- exact condition for all virtual extensions --------------------------------

def test_extended_all_monitored():
    assert check_extended_observability(chain(3, (1, 2, 3))).ok


def test_extended_chain_examples():
    assert check_extended_observability(chain(3, (1, 3))).ok
    check = check_extended_observability(chain(4, (1, 4)))
    assert not check.ok and set(check.violations) == {2, 3}


def test_extended_unmonitored_leaf():
    check = check_extended_observability(chain(3, (1, 2)))
    assert not check.ok and 3 in check.violations


# -- numerical rank oracle ------------------------------------------------------

def test_rank_all_monitored():
    assert rank_observability(chain(4, (1, 2, 3, 4)))


def test_rank_no_measurements():
    assert not rank_observability(chain(3, ()))


def test_rank_clear_gap():
    assert rank_observability(chain(3, (1, 3)))
    # two adjacent gaps leave the middle voltages coupled but recoverable
    assert rank_observability(chain(4, (1, 4)))


# -- exhaustive equivalences on small trees -------------------------------------

def all_small_trees(max_nodes):
    for n in range(2, max_nodes + 1):
        for tree in nx.nonisomorphic_trees(n):
            yield n, list(tree.edges())


@pytest.mark.parametrize("n,edges", list(all_small_trees(6)))
def test_extension_condition_is_exact_on_small_trees(n, edges):
    """The adjacency condition holds iff every midpoint extension is
    numerically observable (full sweep up to 8 nodes in the acceptance
    suite)."""
    for bits in itertools.product((0, 1), repeat=n):
        monitored = [i for i, b in enumerate(bits) if b]
        grid = tree_grid_from_edges(edges, monitored)
        cond = check_extended_observability(grid).ok
        all_ok = True
        for br in grid.branches:
            ext = extend_with_virtual_node(grid, br.id, 0.5)
            if not rank_observability(ext, grid.monitored_ids):
                all_ok = False
                break
        assert cond == all_ok, (edges, monitored)
        if check_plain_observability(grid).ok:
            assert rank_observability(grid), (edges, monitored)


# -- single line UFCs -----------------------------------------------------------

def test_single_line_ufcs_examples():
    assert single_line_ufcs(chain(3, (1, 2, 3))) == {1, 2}
    assert single_line_ufcs(chain(3, (1, 3))) == frozenset()


def test_single_line_ufcs_skip_ineligible():
    grid = make_grid([(1, 1, 2), (2, 2, 3)], monitored=(1, 2, 3),
                     ineligible=(1,))
    assert single_line_ufcs(grid) == {2}


def test_benchmark_single_line_ufcs(benchmark):
    assert single_line_ufcs(benchmark) == {4, 7, 15}


# -- cluster partition ------------------------------------------------------------

def test_clusters_chain_merges_through_gap(chain3_mum):
    part = compute_clusters(chain3_mum)
    assert part.r == 1
    assert part.clusters[0].branches == {1, 2}
    assert part.separator_nodes == frozenset()


def test_clusters_star_separator(star4):
    part = compute_clusters(star4)
    assert part.r == 3
    assert all(len(c.branches) == 1 for c in part.clusters)
    assert part.separator_nodes == {1}
    assert [c.representative for c in part.clusters] == [1, 2, 3]


def test_clusters_require_extension_condition():
    with pytest.raises(ObservabilityError, match="offending"):
        compute_clusters(chain(4, (1, 4)))


def test_benchmark_partition(benchmark):
    part = compute_clusters(benchmark)
    assert part.r == 7
    assert part.separator_nodes == {1, 3, 12}
    groups = sorted(sorted(c.branches) for c in part.clusters)
    assert groups == [[1, 2], [3, 4, 5], [6, 7], [8, 9, 10, 11, 12],
                      [13], [14, 15], [16]]
    gray = part.cluster_of(1)
    assert not gray.hypothesis_eligible
    assert len(part.eligible_clusters) == 6
    # eligible labels follow ascending smallest-branch order
    assert part.eligible_label_of(7) == 2
    assert part.eligible_label_of(10) == 3
    assert part.eligible_label_of(12) == 3


def test_partition_invariants_on_random_trees():
    rng = np.random.default_rng(99)
    checked = 0
    for _ in range(40):
        n = int(rng.integers(4, 13))
        tree = nx.random_labeled_tree(n, seed=int(rng.integers(2**31)))
        edges = list(tree.edges())
        for _ in range(30):
            bits = rng.random(n) < 0.75
            monitored = [i for i in range(n) if bits[i]]
            grid = tree_grid_from_edges(edges, monitored)
            if not check_extended_observability(grid).ok:
                continue
            part = compute_clusters(grid)
            checked += 1
            seen = set()
            for c in part.clusters:
                assert not (c.branches & seen)
                seen |= c.branches
                sub = [grid.branch(b) for b in c.branches]
                nodes = {b.from_node for b in sub} | {b.to_node for b in sub}
                g = nx.Graph()
                g.add_edges_from((b.from_node, b.to_node) for b in sub)
                assert nx.is_connected(g), c
            assert seen == {b.id for b in grid.branches}
            for s in part.separator_nodes:
                assert not grid.node(s).monitored
                assert grid.degree(s) > 2
    assert checked > 100


# -- empirical residual oracle ------------------------------------------------------

def test_oracle_two_node_single_line():
    grid = make_grid([(1, 1, 2)], monitored=(1, 2))
    part = empirical_cluster_oracle(grid, trials=5, seed=0)
    assert part.r == 1 and part.clusters[0].branches == {1}


def test_oracle_chain_equal_residuals(chain3_mum):
    part = empirical_cluster_oracle(chain3_mum, trials=20, seed=0)
    assert [sorted(c.branches) for c in part.eligible_clusters] == [[1, 2]]


def test_oracle_star_singletons(star4):
    part = empirical_cluster_oracle(star4, trials=20, seed=0)
    assert part.r == 3
    assert all(len(c.branches) == 1 for c in part.clusters)


def test_oracle_matches_graph_rule_on_benchmark(benchmark):
    graph = compute_clusters(benchmark)
    oracle = empirical_cluster_oracle(benchmark, trials=20, seed=0)
    assert graph.same_partition(oracle)


def test_oracle_seed_invariance(benchmark):
    a = empirical_cluster_oracle(benchmark, trials=10, seed=1)
    b = empirical_cluster_oracle(benchmark, trials=10, seed=2026)
    assert a.same_partition(b)


def test_oracle_within_cluster_spread(benchmark):
    part = empirical_cluster_oracle(benchmark, trials=20, seed=0)
    for c in part.eligible_clusters:
        branches = sorted(c.branches)
        base = part.oracle_wmrs[branches[0]]
        for b in branches[1:]:
            w = part.oracle_wmrs[b]
            assert np.all(np.abs(w - base) <= 1e-6 * np.maximum(
                np.abs(base), 1e-30))


def test_oracle_merges_square_systems():
    # fully monitored chain: fake nodes make every hypothesis exactly
    # determined, all residuals vanish and the lines merge
    grid = make_grid([(1, 1, 2), (2, 2, 3)], monitored=(1, 2, 3))
    oracle = empirical_cluster_oracle(grid, trials=10, seed=0)
    graph = compute_clusters(grid)
    assert oracle.same_partition(graph)
    assert [sorted(c.branches) for c in oracle.eligible_clusters] == [[1, 2]]
