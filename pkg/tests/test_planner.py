import itertools
import time

import numpy as np
import pytest

from ktcf.errors import InputError
from ktcf.kc_graph import KcGraph
from ktcf.planner import (InstructionPlan, changed_timesteps, discovery_order_kcs,
                          ordered_total_distance, plan)


def path_graph(n):
    return KcGraph(n_nodes=n, edges=tuple((i, i + 1, 1.0) for i in range(n - 1)))


def random_graph(rng, n_nodes, edge_prob=0.15):
    edges = []
    for u in range(n_nodes):
        for v in range(u + 1, n_nodes):
            if rng.uniform() < edge_prob:
                edges.append((u, v, float(rng.integers(1, 4))))
    return KcGraph(n_nodes=n_nodes, edges=tuple(edges))


def exact_path_tsp(graph, nodes, start):
    """Brute-force minimum Hamiltonian path from start over the node set."""
    others = [n for n in nodes if n != start]
    dist = {(u, v): graph.shortest_distance(u, v) for u in nodes for v in nodes}
    best = np.inf
    for perm in itertools.permutations(others):
        total, here = 0.0, start
        for nxt in perm:
            total += dist[here, nxt]
            here = nxt
        best = min(best, total)
    return best


def test_hand_example_on_path_graph():
    # target a, changed {c, d}: greedy from a picks c (2), then d (1);
    # student-facing order is the reverse
    graph = path_graph(4)
    kcs = np.array([2, 3, 0])
    r_orig = np.array([0, 0, 0])
    r_cf = np.array([1, 1, 0])
    result = plan(r_orig, r_cf, kcs, graph, target_kc=0)
    assert result.ordered_kcs == (3, 2, 0)
    assert result.total_path_distance == 3.0
    assert result.source_changed_indices == (0, 1)


def test_single_changed_kc():
    graph = path_graph(5)
    result = plan(np.array([0, 0]), np.array([1, 0]), np.array([1, 4]), graph, 4)
    assert result.ordered_kcs == (1, 4)
    assert result.total_path_distance == 3.0


def test_empty_diff_degenerates_to_target_plan():
    graph = path_graph(3)
    result = plan(np.array([0, 0]), np.array([0, 0]), np.array([1, 2]), graph, 2)
    assert result.ordered_kcs == (2,)
    assert result.total_path_distance == 0.0
    assert result.source_changed_indices == ()


def test_duplicate_changed_kcs_collapse():
    graph = path_graph(4)
    kcs = np.array([1, 1, 1, 0])
    result = plan(np.array([0, 0, 0, 0]), np.array([1, 1, 1, 0]), kcs, graph, 0)
    assert result.ordered_kcs == (1, 0)
    assert result.total_path_distance == 1.0


def test_plan_visits_every_changed_kc_once_and_ends_at_target():
    rng = np.random.default_rng(0)
    for trial in range(50):
        n = int(rng.integers(6, 25))
        graph = random_graph(rng, n)
        t_len = int(rng.integers(4, 16))
        kcs = rng.integers(0, n, t_len)
        r_orig = np.zeros(t_len, dtype=int)
        r_cf = rng.integers(0, 2, t_len)
        r_cf[-1] = 0
        target = int(kcs[-1])
        result = plan(r_orig, r_cf, kcs, graph, target)
        expected_nodes = {int(kcs[t]) for t in np.flatnonzero(r_orig != r_cf)} | {target}
        assert sorted(result.ordered_kcs) == sorted(expected_nodes)
        assert len(set(result.ordered_kcs)) == len(result.ordered_kcs)
        assert result.ordered_kcs[-1] == target


def test_greedy_against_brute_force_path_tsp():
    rng = np.random.default_rng(1)
    for trial in range(60):
        n = int(rng.integers(8, 30))
        graph = random_graph(rng, n)
        size = int(rng.integers(2, 9))
        nodes = sorted(rng.choice(n, size=size, replace=False).tolist())
        target = nodes[0]
        kcs = np.array(nodes[1:] + [target])
        r_orig = np.zeros(len(kcs), dtype=int)
        r_cf = np.ones(len(kcs), dtype=int)
        r_cf[-1] = 0
        result = plan(r_orig, r_cf, kcs, graph, target)
        optimum = exact_path_tsp(graph, set(nodes), target)
        assert sorted(result.ordered_kcs) == sorted(set(nodes))
        assert result.total_path_distance >= optimum - 1e-9


def test_plan_total_matches_ordered_total_distance():
    rng = np.random.default_rng(2)
    graph = random_graph(rng, 20)
    kcs = rng.integers(0, 20, 10)
    r_orig = np.zeros(10, dtype=int)
    r_cf = rng.integers(0, 2, 10)
    result = plan(r_orig, r_cf, kcs, graph, int(kcs[-1]))
    assert result.total_path_distance == pytest.approx(
        ordered_total_distance(result.ordered_kcs, graph))


def test_greedy_tie_breaks_to_smaller_index():
    # star: nodes 1 and 2 both at distance 1 from center 0
    graph = KcGraph(n_nodes=3, edges=((0, 1, 1.0), (0, 2, 1.0)))
    kcs = np.array([1, 2, 0])
    result = plan(np.array([0, 0, 0]), np.array([1, 1, 0]), kcs, graph, 0)
    # greedy from 0: picks 1 (tie with 2 broken by index), then 2 -> reversed
    assert result.ordered_kcs == (2, 1, 0)


def test_plan_deterministic():
    rng = np.random.default_rng(3)
    graph = random_graph(rng, 15)
    kcs = rng.integers(0, 15, 12)
    r_orig = np.zeros(12, dtype=int)
    r_cf = rng.integers(0, 2, 12)
    a = plan(r_orig, r_cf, kcs, graph, int(kcs[-1]))
    b = plan(r_orig, r_cf, kcs, graph, int(kcs[-1]))
    assert a == b


def test_ordered_total_distance_singleton():
    assert ordered_total_distance([3], path_graph(5)) == 0.0


def test_ordered_total_distance_hand_example():
    assert ordered_total_distance([3, 2, 0], path_graph(4)) == 3.0


def test_ordered_total_distance_rejects_empty():
    with pytest.raises(InputError):
        ordered_total_distance([], path_graph(3))


def test_discovery_order_keeps_duplicates_and_appends_target():
    kcs = np.array([5, 3, 5, 2, 0])
    r_orig = np.array([0, 0, 0, 0, 0])
    r_cf = np.array([1, 0, 1, 1, 0])
    assert discovery_order_kcs(r_orig, r_cf, kcs, 0) == (5, 5, 2, 0)


def test_discovery_order_no_double_target():
    kcs = np.array([5, 0, 1])
    r_orig = np.array([0, 0, 0])
    r_cf = np.array([0, 1, 0])
    assert discovery_order_kcs(r_orig, r_cf, kcs, 0) == (0,)


def test_changed_timesteps_validates_shapes():
    with pytest.raises(InputError):
        changed_timesteps(np.array([0, 1]), np.array([0, 1, 1]))


def test_runtime_scales_with_pair_count():
    # per-pair Dijkstra structure: n changed KCs cost ~n single-source runs;
    # generous factor so scheduler noise cannot flake the check
    rng = np.random.default_rng(4)
    graph = random_graph(rng, 120, edge_prob=0.05)

    def timed(n_changed):
        kcs = rng.choice(120, size=n_changed + 1, replace=False)
        r_orig = np.zeros(n_changed + 1, dtype=int)
        r_cf = np.ones(n_changed + 1, dtype=int)
        r_cf[-1] = 0
        best = np.inf
        for _ in range(3):
            started = time.perf_counter()
            plan(r_orig, r_cf, kcs, graph, int(kcs[-1]))
            best = min(best, time.perf_counter() - started)
        return best

    t_small, t_big = timed(5), timed(20)
    # 4x the nodes: allow up to 16x (quadratic) with a wide safety margin
    assert t_big < 16 * 4 * t_small + 0.05
