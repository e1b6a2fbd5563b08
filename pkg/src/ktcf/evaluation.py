"""Metric suite, instance selection, and the benchmark/ablation harness.

All metrics are computed on binarized counterfactuals:

  validity            fraction with target probability > 0.5
  sparsity            Hamming distance to the original responses
  sparsity_rate       Hamming distance / T
  actionability       count of correct->incorrect flips (the unactionable kind)
  actionability_rate  actionability / sparsity (0/0 counts as 0)
  time_s              wall time of the search loop (init through binarize)

Aggregates report mean and population std per method. Because it is
ambiguous whether sparsity should average over all instances or only over
valid ones, both aggregations are emitted (the valid-only ones carry a
``_valid_only`` suffix).
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import cf_engine
from .cf_engine import CfConfig, CfResult
from .data_io import Dataset
from .errors import ConfigError, InputError
from .kc_graph import KcGraph
from .kt_core import KtModel, LearningHistory, _forward_relaxed

PER_INSTANCE_COLUMNS = (
    "instance_id", "method", "valid", "sparsity", "sparsity_rate",
    "actionability", "actionability_rate", "time_s", "n_iterations",
)

AGGREGATE_METRICS = (
    "validity", "sparsity", "sparsity_rate", "actionability",
    "actionability_rate", "time_s", "sparsity_valid_only",
    "sparsity_rate_valid_only",
)


# ---------------------------------------------------------------------------
# Per-instance and aggregate metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InstanceMetrics:
    instance_id: int
    method: str
    valid: bool
    sparsity: int
    sparsity_rate: float
    actionability: int
    actionability_rate: float
    time_s: float
    n_iterations: int

    def row(self) -> list:
        return [self.instance_id, self.method, int(self.valid), self.sparsity,
                repr(self.sparsity_rate), self.actionability,
                repr(self.actionability_rate), repr(self.time_s), self.n_iterations]


@dataclass(frozen=True)
class MethodReport:
    method: str
    n_instances: int
    means: dict[str, float]
    stds: dict[str, float]


@dataclass(frozen=True)
class MetricsReport:
    methods: tuple[MethodReport, ...]

    def by_method(self, name: str) -> MethodReport:
        for rep in self.methods:
            if rep.method == name:
                return rep
        raise KeyError(name)


def instance_metrics(result: CfResult, history: LearningHistory,
                     instance_id: int, method: str) -> InstanceMetrics:
    orig = history.responses
    cf = result.r_cf_binary
    if orig.shape != cf.shape:
        raise InputError("counterfactual and original responses differ in length")
    diff = orig != cf
    sparsity = int(diff.sum())
    unactionable = int(((orig == 1) & (cf == 0)).sum())
    rate = unactionable / sparsity if sparsity else 0.0
    return InstanceMetrics(
        instance_id=instance_id,
        method=method,
        valid=bool(result.valid),
        sparsity=sparsity,
        sparsity_rate=sparsity / len(orig),
        actionability=unactionable,
        actionability_rate=rate,
        time_s=result.wall_time_seconds,
        n_iterations=result.iterations_used,
    )


def compute_metrics(results: Sequence[CfResult], originals: Sequence[LearningHistory],
                    method: str = "method",
                    instance_ids: Sequence[int] | None = None) -> MethodReport:
    """Aggregate one method's results over its instance list."""
    if not results:
        raise InputError("no results to aggregate")
    if len(results) != len(originals):
        raise InputError("results and originals differ in length")
    if instance_ids is None:
        instance_ids = range(len(results))
    rows = [instance_metrics(res, hist, iid, method)
            for res, hist, iid in zip(results, originals, instance_ids)]
    return aggregate_rows(rows, method)


def aggregate_rows(rows: Sequence[InstanceMetrics], method: str) -> MethodReport:
    def stats(values) -> tuple[float, float]:
        arr = np.asarray(list(values), dtype=np.float64)
        if arr.size == 0:
            return math.nan, math.nan
        return float(arr.mean()), float(arr.std())

    means: dict[str, float] = {}
    stds: dict[str, float] = {}
    means["validity"], stds["validity"] = stats(r.valid for r in rows)
    means["sparsity"], stds["sparsity"] = stats(r.sparsity for r in rows)
    means["sparsity_rate"], stds["sparsity_rate"] = stats(r.sparsity_rate for r in rows)
    means["actionability"], stds["actionability"] = stats(r.actionability for r in rows)
    means["actionability_rate"], stds["actionability_rate"] = stats(
        r.actionability_rate for r in rows)
    means["time_s"], stds["time_s"] = stats(r.time_s for r in rows)
    valid_rows = [r for r in rows if r.valid]
    means["sparsity_valid_only"], stds["sparsity_valid_only"] = stats(
        r.sparsity for r in valid_rows)
    means["sparsity_rate_valid_only"], stds["sparsity_rate_valid_only"] = stats(
        r.sparsity_rate for r in valid_rows)
    return MethodReport(method=method, n_instances=len(rows), means=means, stds=stds)


# ---------------------------------------------------------------------------
# Instance selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SelectedInstance:
    instance_id: int  # index into the dataset's student list
    history: LearningHistory
    target_kc: int
    original_prediction: float


@dataclass(frozen=True)
class Selection:
    instances: tuple[SelectedInstance, ...]
    n_eligible: int
    shortfall: bool  # fewer eligible than requested


def select_instances(dataset: Dataset, model: KtModel,
                     fraction_incorrect: float = 0.45,
                     n_instances: int = 200, seed: int = 0) -> Selection:
    """Pick explanation-eligible students and sample a benchmark set.

    Eligible: more than ``fraction_incorrect`` of responses wrong, final
    response wrong, and the model predicting the final step incorrect
    (p <= 0.5). Sampling is uniform without replacement under ``seed``; if
    fewer are eligible than requested, all of them come back with the
    shortfall flag set.
    """
    eligible: list[SelectedInstance] = []
    for idx, hist in enumerate(dataset.students):
        responses = hist.responses
        if responses[-1] != 0:
            continue
        if (responses == 0).mean() <= fraction_incorrect:
            continue
        p = float(_forward_relaxed(
            model, hist.kcs, responses.astype(np.float64)[None, :])[0][0, -1])
        if p > 0.5:
            continue
        eligible.append(SelectedInstance(idx, hist, hist.target_kc, p))

    rng = np.random.default_rng(seed)
    if len(eligible) <= n_instances:
        return Selection(tuple(eligible), len(eligible), len(eligible) < n_instances)
    chosen = sorted(rng.choice(len(eligible), size=n_instances, replace=False))
    return Selection(tuple(eligible[int(j)] for j in chosen), len(eligible), False)


# ---------------------------------------------------------------------------
# Method registry
# ---------------------------------------------------------------------------

KTCF_METHOD = "ktcf"
BASELINE_METHODS = ("wachter", "dice")
DICE_DEFAULT_K = 3


def method_label(method: str, init: str) -> str:
    pretty = {"ktcf": "KTCF", "wachter": "Wachter", "dice": "DiCE"}[method]
    return f"{pretty}-{init}"


def make_runner(method: str, cfg: CfConfig,
                graph: KcGraph, dice_k: int = DICE_DEFAULT_K,
                ) -> Callable[[KtModel, LearningHistory, int], CfResult]:
    """Bind a method name to a per-instance callable with derived seeds."""
    if method == "ktcf":
        def run(model, history, instance_seed):
            return cf_engine.generate(
                model, history, graph, replace(cfg, seed=instance_seed))
    elif method == "wachter":
        if cfg.init != "rand":
            raise ConfigError("the plain baseline only supports rand initialization")
        def run(model, history, instance_seed):
            return cf_engine.baseline_wachter(
                model, history, replace(cfg, seed=instance_seed))
    elif method == "dice":
        if cfg.init != "rand":
            raise ConfigError("the diverse baseline only supports rand initialization")
        def run(model, history, instance_seed):
            return cf_engine.baseline_dice_like(
                model, history, replace(cfg, seed=instance_seed), k=dice_k)[0]
    else:
        raise ConfigError(f"unknown method {method!r}")
    return run


def _instance_seed(global_seed: int, instance_id: int, method_tag: str) -> int:
    # stable per-(seed, instance, method) stream derivation
    digest = np.random.SeedSequence(
        entropy=global_seed,
        spawn_key=(instance_id, sum(ord(ch) for ch in method_tag)),
    ).generate_state(1)[0]
    return int(digest)


# ---------------------------------------------------------------------------
# Benchmark + ablation
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkOutcome:
    report: MetricsReport
    per_instance: list[InstanceMetrics]
    selection: Selection
    failures: list[tuple[int, str, str]] = field(default_factory=list)


def run_benchmark(dataset: Dataset, model: KtModel, graph: KcGraph,
                  method_specs: Sequence[tuple[str, str, CfConfig]],
                  n_instances: int = 200, fraction_incorrect: float = 0.45,
                  seed: int = 0,
                  selection: Selection | None = None) -> BenchmarkOutcome:
    """Run every (method, init, config) spec on one shared instance list.

    Per-instance failures are recorded and count as invalid zero-change
    rows rather than aborting the run. Timing comes from each search's own
    wall clock; run single-worker when timings matter.
    """
    if selection is None:
        selection = select_instances(dataset, model, fraction_incorrect,
                                     n_instances, seed)
    if not selection.instances:
        raise InputError(
            "no eligible instances: selection requires more than "
            f"{fraction_incorrect:.0%} incorrect responses, a final incorrect "
            "response, and a model prediction <= 0.5")

    per_instance: list[InstanceMetrics] = []
    failures: list[tuple[int, str, str]] = []
    reports = []
    for method, init, cfg in method_specs:
        label = method_label(method, init)
        runner = make_runner(method, replace(cfg, init=init), graph)
        rows = []
        for inst in selection.instances:
            iseed = _instance_seed(seed, inst.instance_id, label)
            try:
                result = runner(model, inst.history, iseed)
            except Exception as exc:  # failed searches count as invalid
                failures.append((inst.instance_id, label, str(exc)))
                result = CfResult(
                    r_cf_binary=inst.history.responses.copy(),
                    r_cf_relaxed=inst.history.responses.astype(np.float64),
                    valid=False, target_prob=inst.original_prediction,
                    iterations_used=0, loss_trace=[], changed_indices=(),
                    wall_time_seconds=0.0)
            rows.append(instance_metrics(result, inst.history,
                                         inst.instance_id, label))
        per_instance.extend(rows)
        reports.append(aggregate_rows(rows, label))
    return BenchmarkOutcome(MetricsReport(tuple(reports)), per_instance,
                            selection, failures)


ABLATION_AXES = ("lambda_noise", "lambda_temp", "lambda_kc")


def run_ablation(dataset: Dataset, model: KtModel, graph: KcGraph,
                 axis: str, values: Sequence[float],
                 method_specs: Sequence[tuple[str, str, CfConfig]],
                 n_instances: int = 200, fraction_incorrect: float = 0.45,
                 seed: int = 0) -> list[tuple[float, MetricsReport]]:
    """Re-run the benchmark once per value of one hyperparameter axis."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
    if not values:
        raise ConfigError("ablation needs at least one axis value")
    selection = select_instances(dataset, model, fraction_incorrect,
                                 n_instances, seed)
    sweeps = []
    for value in values:
        specs = [(m, i, replace(cfg, **{axis: value})) for m, i, cfg in method_specs]
        outcome = run_benchmark(dataset, model, graph, specs,
                                seed=seed, selection=selection)
        sweeps.append((float(value), outcome.report))
    return sweeps


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def _atomic_writer(path: Path):
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    return fd, tmp


def write_per_instance_csv(rows: Sequence[InstanceMetrics], path: str | Path):
    path = Path(path)
    fd, tmp = _atomic_writer(path)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(PER_INSTANCE_COLUMNS)
            for row in rows:
                writer.writerow(row.row())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_aggregate_csv(report: MetricsReport, path: str | Path):
    path = Path(path)
    fd, tmp = _atomic_writer(path)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "metric", "mean", "std"])
            for rep in report.methods:
                for metric in AGGREGATE_METRICS:
                    writer.writerow([rep.method, metric,
                                     repr(rep.means[metric]), repr(rep.stds[metric])])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_ablation_csv(axis: str, sweeps: Sequence[tuple[float, MetricsReport]],
                       path: str | Path):
    """Long format: one row per (axis value, method, metric)."""
    path = Path(path)
    fd, tmp = _atomic_writer(path)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["axis", "axis_value", "method", "metric", "mean", "std"])
            for value, report in sweeps:
                for rep in report.methods:
                    for metric in AGGREGATE_METRICS:
                        writer.writerow([axis, repr(value), rep.method, metric,
                                         repr(rep.means[metric]),
                                         repr(rep.stds[metric])])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_table(report: MetricsReport) -> str:
    """Fixed-width text table with the benchmark column layout."""
    headers = ["Methods", "Validity", "Sparsity", "Sparsity Rate",
               "Actionability", "Actionability Rate", "Time (s)"]
    keys = ["validity", "sparsity", "sparsity_rate", "actionability",
            "actionability_rate", "time_s"]
    rows = [headers]
    for rep in report.methods:
        cells = [rep.method]
        for key in keys:
            cells.append(f"{rep.means[key]:.3f}±{rep.stds[key]:.2f}")
        rows.append(cells)
    widths = [max(len(row[i]) for row in rows) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)))
        if i == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"
