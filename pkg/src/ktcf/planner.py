"""Turn a counterfactual diff into an ordered study plan.

The changed timesteps are collapsed to their unique KCs, pairwise shortest
distances are taken over the relation graph, and a greedy nearest-neighbor
Hamiltonian path is grown from the target concept on the induced complete
graph. The reversed path is the student-facing order: study outward
concepts first, finish at the target. Greedy carries no optimality
guarantee, but in practice it shortens the raw discovery-order walk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .kc_graph import KcGraph


@dataclass(frozen=True)
class InstructionPlan:
    """Ordered KC visit list ending at the target concept."""

    ordered_kcs: tuple[int, ...]
    total_path_distance: float
    source_changed_indices: tuple[int, ...]


def ordered_total_distance(kc_sequence, graph: KcGraph) -> float:
    """Sum of shortest-path distances between consecutive KCs (0 if singleton)."""
    seq = [int(k) for k in kc_sequence]
    if not seq:
        raise InputError("KC sequence must be non-empty")
    total = 0.0
    for u, v in zip(seq, seq[1:]):
        total += graph.shortest_distance(u, v)
    return total


def changed_timesteps(r_orig, r_cf_binary) -> tuple[int, ...]:
    r_orig = np.asarray(r_orig)
    r_cf = np.asarray(r_cf_binary)
    if r_orig.shape != r_cf.shape:
        raise InputError("original and counterfactual responses differ in length")
    return tuple(int(t) for t in np.flatnonzero(r_orig != r_cf))


def discovery_order_kcs(r_orig, r_cf_binary, kcs, target_kc: int) -> tuple[int, ...]:
    """Changed KCs in timestep order (duplicates kept), ending at the target.

    This is the unprocessed reading order the plan is compared against; the
    target is appended when the walk does not already end there.
    """
    kcs = np.asarray(kcs, dtype=np.int64)
    raw = [int(kcs[t]) for t in changed_timesteps(r_orig, r_cf_binary)]
    if not raw or raw[-1] != target_kc:
        raw.append(int(target_kc))
    return tuple(raw)


def plan(r_orig, r_cf_binary, kcs, graph: KcGraph, target_kc: int) -> InstructionPlan:
    """Greedy nearest-neighbor study order over the modified concepts.

    Builds the unique changed-KC set plus the target, grows a path from the
    target picking the closest unvisited concept each time (ties to the
    smaller KC index), and returns the reversed path with its total
    distance. An empty diff degenerates to the single-node target plan.
    """
    kcs = np.asarray(kcs, dtype=np.int64)
    if len(kcs) != len(np.asarray(r_orig)):
        raise InputError("kcs and responses differ in length")
    if not 0 <= target_kc < graph.n_nodes:
        raise InputError(f"target KC {target_kc} outside graph [0,{graph.n_nodes})")

    changed = changed_timesteps(r_orig, r_cf_binary)
    nodes = sorted({int(kcs[t]) for t in changed} | {int(target_kc)})
    if len(nodes) == 1:
        return InstructionPlan((int(target_kc),), 0.0, changed)

    dist = graph.all_pairs_among(nodes)
    pos = {kc: i for i, kc in enumerate(nodes)}

    path = [int(target_kc)]
    visited = {pos[target_kc]}
    total = 0.0
    while len(path) < len(nodes):
        here = pos[path[-1]]
        best_j, best_d = None, None
        for j, kc in enumerate(nodes):  # ascending KC order breaks ties
            if j in visited:
                continue
            d = dist[here, j]
            if best_d is None or d < best_d:
                best_j, best_d = j, d
        visited.add(best_j)
        path.append(nodes[best_j])
        total += float(best_d)

    path.reverse()
    return InstructionPlan(tuple(path), total, changed)
