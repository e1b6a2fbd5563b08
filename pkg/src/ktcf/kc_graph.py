"""Undirected knowledge-concept relation graph with shortest-path queries.

The graph is immutable once built: all queries are safe to share across
concurrent explanation jobs. Distances between disconnected concepts are
reported as a large finite penalty (``unreachable_penalty``, default |V|)
so downstream losses and path totals stay well-defined.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InputError


@dataclass(frozen=True)
class KcGraph:
    """Simple undirected graph over KC indices 0..n_nodes-1."""

    n_nodes: int
    edges: tuple[tuple[int, int, float], ...]  # (u, v, w) with u < v, w > 0
    unreachable_penalty: float = 0.0  # 0.0 placeholder -> n_nodes in __post_init__
    _adj: dict[int, list[tuple[int, float]]] = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if self.n_nodes < 1:
            raise InputError("graph needs at least one node")
        if self.unreachable_penalty <= 0:
            object.__setattr__(self, "unreachable_penalty", float(self.n_nodes))
        seen = set()
        adj: dict[int, list[tuple[int, float]]] = {u: [] for u in range(self.n_nodes)}
        for u, v, w in self.edges:
            if u == v:
                raise InputError(f"self-loop at node {u}")
            if not (0 <= u < self.n_nodes and 0 <= v < self.n_nodes):
                raise InputError(f"edge ({u},{v}) has endpoint outside [0,{self.n_nodes})")
            if w <= 0:
                raise InputError(f"edge ({u},{v}) has non-positive weight {w}")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise InputError(f"duplicate edge ({u},{v})")
            seen.add(key)
            adj[u].append((v, float(w)))
            adj[v].append((u, float(w)))
        # Neighbor lists sorted by index: deterministic iteration everywhere.
        for u in adj:
            adj[u].sort()
        object.__setattr__(self, "_adj", adj)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, u: int) -> list[tuple[int, float]]:
        self._check_node(u)
        return list(self._adj[u])

    def _check_node(self, u: int):
        if not (0 <= u < self.n_nodes):
            raise InputError(f"node index {u} outside [0,{self.n_nodes})")

    def distances_from(self, source: int) -> np.ndarray:
        """Single-source Dijkstra; unreachable nodes get the penalty distance.

        Binary-heap implementation; ties resolved by smaller node index via
        the (distance, node) heap ordering.
        """
        self._check_node(source)
        dist = np.full(self.n_nodes, math.inf)
        dist[source] = 0.0
        done = [False] * self.n_nodes
        heap = [(0.0, source)]
        while heap:
            d, u = heapq.heappop(heap)
            if done[u]:
                continue
            done[u] = True
            for v, w in self._adj[u]:
                nd = d + w
                if nd < dist[v]:
                    dist[v] = nd
                    heapq.heappush(heap, (nd, v))
        dist[np.isinf(dist)] = self.unreachable_penalty
        return dist

    def shortest_distance(self, u: int, v: int) -> float:
        """Minimum-weight path length between u and v (penalty if disconnected)."""
        self._check_node(v)
        return float(self.distances_from(u)[v])

    def all_pairs_among(self, subset: Sequence[int]) -> np.ndarray:
        """Distance matrix D[i][j] between subset[i] and subset[j]."""
        nodes = list(subset)
        if not nodes:
            raise InputError("subset must be non-empty")
        for u in nodes:
            self._check_node(u)
        mat = np.zeros((len(nodes), len(nodes)))
        for i, u in enumerate(nodes):
            mat[i] = self.distances_from(u)[nodes]
        return mat


def load_graph(path: str | Path) -> KcGraph:
    """Parse an edge-list graph file.

    Format: UTF-8 text, first non-comment line is the node count, then one
    edge per line as "u v [w]" (0-based, whitespace-separated); '#' starts
    a comment.
    """
    n_nodes = None
    edges: list[tuple[int, int, float]] = []
    seen: set[tuple[int, int]] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if n_nodes is None:
                if len(parts) != 1:
                    raise FormatError("expected node count on the first line", lineno)
                try:
                    n_nodes = int(parts[0])
                except ValueError:
                    raise FormatError(f"bad node count {parts[0]!r}", lineno) from None
                if n_nodes < 1:
                    raise FormatError(f"node count must be positive, got {n_nodes}", lineno)
                continue
            if len(parts) not in (2, 3):
                raise FormatError(f"expected 'u v [w]', got {line!r}", lineno)
            try:
                u, v = int(parts[0]), int(parts[1])
                w = float(parts[2]) if len(parts) == 3 else 1.0
            except ValueError:
                raise FormatError(f"bad edge line {line!r}", lineno) from None
            if u == v:
                raise FormatError(f"self-loop at node {u}", lineno)
            if not (0 <= u < n_nodes and 0 <= v < n_nodes):
                raise FormatError(f"edge ({u},{v}) endpoint >= node count {n_nodes}", lineno)
            if w <= 0:
                raise FormatError(f"edge weight must be positive, got {w}", lineno)
            key = (min(u, v), max(u, v))
            if key in seen:
                raise FormatError(f"duplicate edge ({u},{v})", lineno)
            seen.add(key)
            edges.append((key[0], key[1], w))
    if n_nodes is None:
        raise FormatError("empty graph file")
    return KcGraph(n_nodes=n_nodes, edges=tuple(edges))


def save_graph(graph: KcGraph, path: str | Path):
    """Write the edge-list format produced by :func:`load_graph`."""
    lines = [f"{graph.n_nodes}\n"]
    for u, v, w in graph.edges:
        if w == 1.0:
            lines.append(f"{u} {v}\n")
        else:
            lines.append(f"{u} {v} {w!r}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")
