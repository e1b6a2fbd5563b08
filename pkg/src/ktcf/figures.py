"""Figure rendering for the report paths.

Every command that writes delimited output can also drop PNG figures next
to it: training curves, benchmark metric bars, ablation sweep lines, and
the per-iteration loss trace of a single explanation. All rendering uses
the Agg backend so it works headless; figures are a convenience view, the
CSV stays the contract.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .cf_engine import CfResult
from .evaluation import MetricsReport
from .kt_core import TrainReport

_BAR_METRICS = ("validity", "sparsity", "sparsity_rate",
                "actionability", "actionability_rate", "time_s")
_LINE_METRICS = ("validity", "sparsity", "actionability")


def save_training_curves(report: TrainReport, path: str | Path):
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = np.arange(1, len(report.train_losses) + 1)
    ax.plot(epochs, report.train_losses, label="train")
    ax.plot(epochs, report.holdout_losses, label="held-out")
    ax.set_xlabel("epoch")
    ax.set_ylabel("next-step BCE")
    ax.set_title(f"training curves (held-out AUC {report.holdout_auc:.3f})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_benchmark_bars(report: MetricsReport, path: str | Path):
    fig, axes = plt.subplots(2, 3, figsize=(13, 7))
    methods = [rep.method for rep in report.methods]
    x = np.arange(len(methods))
    for ax, metric in zip(axes.ravel(), _BAR_METRICS):
        means = [rep.means[metric] for rep in report.methods]
        stds = [rep.stds[metric] for rep in report.methods]
        ax.bar(x, means, yerr=stds, capsize=3)
        ax.set_xticks(x)
        ax.set_xticklabels(methods, rotation=30, ha="right", fontsize=8)
        ax.set_title(metric)
    fig.suptitle("benchmark metrics (mean ± std)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_ablation_lines(axis: str, sweeps: list[tuple[float, MetricsReport]],
                        path: str | Path):
    fig, axes = plt.subplots(1, len(_LINE_METRICS), figsize=(13, 4))
    values = [v for v, _ in sweeps]
    methods = [rep.method for rep in sweeps[0][1].methods]
    for ax, metric in zip(np.atleast_1d(axes), _LINE_METRICS):
        for method in methods:
            series = [report.by_method(method).means[metric] for _, report in sweeps]
            ax.plot(values, series, marker="o", label=method)
        ax.set_xlabel(axis)
        ax.set_title(metric)
        if len(set(values)) > 2 and min(values) > 0 and max(values) / min(values) > 20:
            ax.set_xscale("log")
    np.atleast_1d(axes)[0].legend(fontsize=8)
    fig.suptitle(f"sensitivity to {axis}")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_loss_trace(result: CfResult, path: str | Path):
    fig, ax = plt.subplots(figsize=(6, 4))
    trace = np.asarray(result.loss_trace)
    its = np.arange(1, len(trace) + 1)
    for idx, name in enumerate(("total", "prediction", "sparsity", "kc distance")):
        ax.plot(its, trace[:, idx], label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title("counterfactual search trace")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
