"""Synthetic student data, the KC relation graph builder, and persistence.

The simulator gives the tracer something real to learn: each student
carries a latent per-KC mastery vector; practicing a concept raises its
mastery and spills over to graph neighbors, and the next concept is drawn
with a locality bias toward neighbors of the recent one. Spillover is what
makes the concept-distance penalty meaningful downstream: flips on
graph-near concepts genuinely move the model more than far ones.

Dataset interchange is line-delimited JSON: a header record carrying
{format_version, n_kcs}, then one {student_id, kcs, responses} record per
student.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .kc_graph import KcGraph
from .kt_core import LearningHistory

DATASET_FORMAT_VERSION = 1

_BETA_CONCENTRATION = 7.0  # p_init=2/7 gives the default Beta(2,5) spread
_REPEAT_WEIGHT = 0.45      # share of local draws that re-practice the same KC
_ABILITY_SHAPE = 1.2       # Beta(a,a) spread of the per-student ability scalar


@dataclass(frozen=True)
class Dataset:
    n_kcs: int
    students: tuple[LearningHistory, ...]

    def __len__(self) -> int:
        return len(self.students)


@dataclass
class SyntheticConfig:
    n_students: int = 2000
    n_kcs: int = 50
    t_range: tuple[int, int] = (40, 60)
    graph_style: str = "random_tree_plus"  # or "clustered"
    p_init: float = 2.0 / 7.0   # mean initial mastery
    learn_rate: float = 0.08    # mastery gain per practice
    slip: float = 0.1
    guess: float = 0.15
    locality: float = 0.96      # prob. the next KC stays in the recent closed neighborhood
    extra_edge_fraction: float = 0.1  # tree edges plus this fraction of |V| extras
    seed: int = 0

    def __post_init__(self):
        if self.n_kcs < 2:
            raise ConfigError("need at least 2 KCs")
        if self.n_students < 1:
            raise ConfigError("need at least 1 student")
        if self.t_range[0] < 2 or self.t_range[0] > self.t_range[1]:
            raise ConfigError(f"bad sequence-length range {self.t_range}")
        for name in ("p_init", "learn_rate", "slip", "guess", "locality"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0,1], got {value}")
        if self.graph_style not in ("random_tree_plus", "clustered"):
            raise ConfigError(f"unknown graph_style {self.graph_style!r}")


# ---------------------------------------------------------------------------
# Graph construction
# ---------------------------------------------------------------------------

def _tree_plus_edges(n: int, extra_fraction: float, rng: np.random.Generator):
    edges = set()
    for v in range(1, n):  # random-attachment spanning tree
        u = int(rng.integers(0, v))
        edges.add((min(u, v), max(u, v)))
    n_extra = int(round(extra_fraction * n))
    attempts = 0
    while n_extra > 0 and attempts < 50 * n:
        attempts += 1
        u, v = int(rng.integers(0, n)), int(rng.integers(0, n))
        if u == v:
            continue
        key = (min(u, v), max(u, v))
        if key in edges:
            continue
        edges.add(key)
        n_extra -= 1
    return edges

def _clustered_edges(n: int, extra_fraction: float, rng: np.random.Generator):
    n_clusters = max(2, int(round(np.sqrt(n) / 1.5)))
    labels = np.sort(rng.integers(0, n_clusters, n))
    edges = set()
    for c in range(n_clusters):
        members = np.flatnonzero(labels == c)
        for i in range(1, len(members)):  # intra-cluster tree
            j = int(rng.integers(0, i))
            u, v = int(members[j]), int(members[i])
            edges.add((min(u, v), max(u, v)))
    for c in range(1, n_clusters):  # one bridge per adjacent cluster pair
        a = np.flatnonzero(labels == c - 1)
        b = np.flatnonzero(labels == c)
        if len(a) and len(b):
            u = int(a[rng.integers(0, len(a))])
            v = int(b[rng.integers(0, len(b))])
            if u != v:
                edges.add((min(u, v), max(u, v)))
    n_extra = int(round(extra_fraction * n))
    attempts = 0
    while n_extra > 0 and attempts < 50 * n:
        attempts += 1
        u, v = int(rng.integers(0, n)), int(rng.integers(0, n))
        if u == v or (min(u, v), max(u, v)) in edges:
            continue
        edges.add((min(u, v), max(u, v)))
        n_extra -= 1
    return edges


def build_kc_graph(cfg: SyntheticConfig, rng: np.random.Generator) -> KcGraph:
    if cfg.graph_style == "random_tree_plus":
        edges = _tree_plus_edges(cfg.n_kcs, cfg.extra_edge_fraction, rng)
    else:
        edges = _clustered_edges(cfg.n_kcs, cfg.extra_edge_fraction, rng)
    return KcGraph(n_nodes=cfg.n_kcs,
                   edges=tuple((u, v, 1.0) for u, v in sorted(edges)))


# ---------------------------------------------------------------------------
# Student simulation
# ---------------------------------------------------------------------------

def _initial_mastery(mean: float, rng: np.random.Generator, n: int) -> np.ndarray:
    if mean <= 0.0 or mean >= 1.0:
        return np.full(n, np.clip(mean, 0.0, 1.0))
    a = _BETA_CONCENTRATION * mean
    b = _BETA_CONCENTRATION * (1.0 - mean)
    return rng.beta(a, b, n)


def _student_profile(cfg: SyntheticConfig, rng: np.random.Generator):
    """Per-student dynamics scaled by a persistent ability scalar.

    Ability spreads initial mastery, learning speed, and slip rate around
    the configured values (which stay the population means); without it all
    students drift to the same saturated mastery and next-step correctness
    becomes near-unpredictable noise.
    """
    if cfg.p_init in (0.0, 1.0):  # degenerate configs stay exact
        return np.full(cfg.n_kcs, cfg.p_init), cfg.learn_rate, cfg.slip
    ability = rng.beta(_ABILITY_SHAPE, _ABILITY_SHAPE)
    m0_mean = float(np.clip(2.0 * cfg.p_init * ability, 0.02, 0.95))
    mastery = _initial_mastery(m0_mean, rng, cfg.n_kcs)
    learn_rate = cfg.learn_rate * 2.0 * ability
    slip = float(np.clip(2.0 * cfg.slip * (1.0 - ability), 0.0, 0.5))
    return mastery, learn_rate, slip


def generate_dataset(cfg: SyntheticConfig) -> tuple[Dataset, KcGraph]:
    """Simulate students over a fresh KC graph; deterministic given cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    graph = build_kc_graph(cfg, rng)
    neighbors = [[v for v, _ in graph.neighbors(u)] for u in range(cfg.n_kcs)]
    closed = [[u] + neighbors[u] for u in range(cfg.n_kcs)]

    students = []
    for sid in range(cfg.n_students):
        mastery, learn_rate, slip = _student_profile(cfg, rng)
        t_len = int(rng.integers(cfg.t_range[0], cfg.t_range[1] + 1))
        kcs = np.empty(t_len, dtype=np.int64)
        responses = np.empty(t_len, dtype=np.int64)
        kc = int(rng.integers(0, cfg.n_kcs))
        for t in range(t_len):
            if t > 0:
                u = rng.uniform()
                # local draws mix same-KC drilling with hops to neighbors
                if u < cfg.locality * _REPEAT_WEIGHT:
                    pass
                elif u < cfg.locality and neighbors[kc]:
                    kc = neighbors[kc][int(rng.integers(0, len(neighbors[kc])))]
                else:
                    kc = int(rng.integers(0, cfg.n_kcs))
            kcs[t] = kc
            p_correct = mastery[kc] * (1.0 - slip) + (1.0 - mastery[kc]) * cfg.guess
            responses[t] = int(rng.uniform() < p_correct)
            # practice strengthens the concept and its neighborhood
            for u2 in closed[kc]:
                mastery[u2] += learn_rate * (1.0 - mastery[u2])
        students.append(LearningHistory(kcs, responses, student_id=sid))
    return Dataset(cfg.n_kcs, tuple(students)), graph


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, path: str | Path):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".jsonl.tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            header = {"format_version": DATASET_FORMAT_VERSION, "n_kcs": dataset.n_kcs}
            fh.write(json.dumps(header) + "\n")
            for hist in dataset.students:
                record = {
                    "student_id": hist.student_id,
                    "kcs": hist.kcs.tolist(),
                    "responses": hist.responses.tolist(),
                }
                fh.write(json.dumps(record) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path: str | Path) -> Dataset:
    students = []
    n_kcs = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"bad JSON: {exc.msg}", lineno) from exc
            if n_kcs is None:
                version = record.get("format_version")
                if version != DATASET_FORMAT_VERSION:
                    raise FormatError(
                        f"unsupported dataset format version {version!r}", lineno)
                n_kcs = record.get("n_kcs")
                if not isinstance(n_kcs, int) or n_kcs < 2:
                    raise FormatError(f"bad n_kcs in header: {n_kcs!r}", lineno)
                continue
            try:
                hist = LearningHistory(
                    np.asarray(record["kcs"]),
                    np.asarray(record["responses"]),
                    student_id=record.get("student_id"),
                )
            except (KeyError, TypeError, ValueError, InputError) as exc:
                raise FormatError(f"bad student record: {exc}", lineno) from exc
            if hist.kcs.max() >= n_kcs:
                raise FormatError(
                    f"KC index {int(hist.kcs.max())} >= header n_kcs {n_kcs}", lineno)
            students.append(hist)
    if n_kcs is None:
        raise FormatError("empty dataset file")
    return Dataset(n_kcs, tuple(students))
