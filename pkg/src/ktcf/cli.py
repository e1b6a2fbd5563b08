"""Command-line pipelines: gen-data, train, explain, bench, ablate.

Every command writes its artifacts plus a run manifest (full flag
snapshot, seeds, paths, version, timestamps) into the output directory;
outputs are written via temp-file-then-rename so failures leave no partial
files. Exit codes: 0 success, 2 usage errors, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .cf_engine import INIT_STRATEGIES, CfConfig
from .data_io import SyntheticConfig, generate_dataset, load_dataset, save_dataset
from .errors import ConfigError, KtcfError
from .evaluation import (ABLATION_AXES, method_label, run_ablation, run_benchmark,
                         select_instances, format_table, make_runner,
                         write_ablation_csv, write_aggregate_csv,
                         write_per_instance_csv, _instance_seed)
from .kc_graph import load_graph, save_graph
from .kt_core import TrainConfig, load_model, save_model, train
from .planner import discovery_order_kcs, ordered_total_distance, plan


def _env_seed(value: int | None) -> int:
    """--seed flag, falling back to KTCF_SEED, falling back to 0."""
    if value is not None:
        return value
    env = os.environ.get("KTCF_SEED")
    return int(env) if env else 0


def _atomic_write_text(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _ManifestWriter:
    """Collects one command's config/paths and lands run_manifest.json."""

    def __init__(self, command: str, args: argparse.Namespace, out_dir: Path):
        self.record = {
            "command": command,
            "tool_version": __version__,
            "config": {k: v for k, v in sorted(vars(args).items())
                       if k not in ("func",)},
            "outputs": [],
            "started_utc": datetime.now(timezone.utc).isoformat(),
        }
        self.out_dir = out_dir

    def add_output(self, path: Path):
        self.record["outputs"].append(str(path))

    def set_seed(self, seed: int):
        self.record["seed_used"] = seed

    def finish(self):
        self.record["finished_utc"] = datetime.now(timezone.utc).isoformat()
        _atomic_write_text(self.out_dir / "run_manifest.json",
                           json.dumps(self.record, indent=2, default=str) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_kc_labels(path: str | None) -> dict[int, str]:
    """Optional 'index name...' lines mapping KC ids to display names."""
    if path is None:
        return {}
    labels = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            idx, _, name = line.partition(" ")
            labels[int(idx)] = name.strip() or str(idx)
    return labels


def _kc_name(kc: int, labels: dict[int, str]) -> str:
    return labels.get(kc, f"kc_{kc}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    manifest = _ManifestWriter("gen-data", args, out)
    seed = _env_seed(args.seed)
    manifest.set_seed(seed)
    cfg = SyntheticConfig(
        n_students=args.n_students, n_kcs=args.n_kcs,
        t_range=(args.t_min, args.t_max), graph_style=args.graph_style,
        p_init=args.p_init, learn_rate=args.learn_rate, slip=args.slip,
        guess=args.guess, locality=args.locality, seed=seed)
    dataset, graph = generate_dataset(cfg)
    dataset_path = out / "dataset.jsonl"
    graph_path = out / "graph.txt"
    save_dataset(dataset, dataset_path)
    save_graph(graph, graph_path)
    manifest.add_output(dataset_path)
    manifest.add_output(graph_path)
    manifest.finish()
    corr = float(np.mean([h.responses.mean() for h in dataset.students]))
    print(f"wrote {len(dataset)} students over {dataset.n_kcs} KCs "
          f"(mean correctness {corr:.3f}) to {dataset_path}")
    print(f"wrote graph |V|={graph.n_nodes} |E|={graph.n_edges} to {graph_path}")
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    manifest = _ManifestWriter("train", args, out)
    dataset = load_dataset(args.dataset)
    seed = _env_seed(args.seed)
    manifest.set_seed(seed)
    cfg = TrainConfig(
        hidden_size=args.hidden_size, learning_rate=args.learning_rate,
        batch_size=args.batch_size, max_epochs=args.max_epochs,
        seed=seed)
    model, report = train(dataset.students, dataset.n_kcs, cfg)
    model_path = out / "model.npz"
    report_path = out / "training_report.json"
    save_model(model, model_path)
    _atomic_write_text(report_path, json.dumps(report.to_dict(), indent=2) + "\n")
    manifest.add_output(model_path)
    manifest.add_output(report_path)
    if not args.no_figures:
        from . import figures
        fig_path = out / "training_curves.png"
        figures.save_training_curves(report, fig_path)
        manifest.add_output(fig_path)
    manifest.finish()
    print(f"trained on {report.n_train} students ({report.epochs_run} epochs): "
          f"held-out accuracy {report.holdout_accuracy:.4f}, "
          f"AUC {report.holdout_auc:.4f}")
    print(f"wrote {model_path}")
    return 0


def _resolve_init(args) -> str:
    """Baselines run rand unless the user explicitly asks otherwise."""
    if args.init is not None:
        if args.method != "ktcf" and args.init != "rand":
            raise ConfigError(
                f"--init {args.init} is only valid with --method ktcf")
        return args.init
    return "rn" if args.method == "ktcf" else "rand"


def _cf_config(args, seed: int, init: str) -> CfConfig:
    return CfConfig(
        lambda_spar=args.lambda_spar, lambda_kc=args.lambda_kc,
        n_iter=args.n_iter, eta=args.eta, tau=args.tau, init=init,
        lambda_noise=args.lambda_noise, lambda_cc=args.lambda_cc,
        lambda_temp=args.lambda_temp, seed=seed)


def cmd_explain(args) -> int:
    init = _resolve_init(args)
    out = _out_dir(args)
    manifest = _ManifestWriter("explain", args, out)
    dataset = load_dataset(args.dataset)
    graph = load_graph(args.graph)
    model = load_model(args.model)
    labels = _load_kc_labels(args.kc_labels)
    seed = _env_seed(args.seed)
    manifest.set_seed(seed)

    try:
        instance = next(h for h in dataset.students if h.student_id == args.instance_id)
    except StopIteration:
        raise KtcfError(f"no student with id {args.instance_id} in {args.dataset}")

    cfg = _cf_config(args, seed, init)
    runner = make_runner(args.method, cfg, graph)
    result = runner(model, instance, _instance_seed(
        seed, args.instance_id, method_label(args.method, init)))

    target = instance.target_kc
    study_plan = plan(instance.responses, result.r_cf_binary, instance.kcs,
                      graph, target)
    raw_order = discovery_order_kcs(instance.responses, result.r_cf_binary,
                                    instance.kcs, target)
    raw_distance = ordered_total_distance(raw_order, graph)

    record = {
        "instance_id": args.instance_id,
        "method": method_label(args.method, init),
        "target_kc": target,
        "valid": result.valid,
        "target_prob": result.target_prob,
        "iterations_used": result.iterations_used,
        "wall_time_seconds": result.wall_time_seconds,
        "original_responses": instance.responses.tolist(),
        "counterfactual_responses": result.r_cf_binary.tolist(),
        "changed_indices": list(result.changed_indices),
        "changed_kcs_in_order": list(raw_order),
        "raw_total_path_distance": raw_distance,
        "plan_kcs": list(study_plan.ordered_kcs),
        "plan_total_path_distance": study_plan.total_path_distance,
    }
    json_path = out / "explanation.json"
    _atomic_write_text(json_path, json.dumps(record, indent=2) + "\n")
    manifest.add_output(json_path)

    lines = [
        f"instance: {args.instance_id}",
        f"method: {method_label(args.method, init)}",
        f"target KC: {_kc_name(target, labels)}",
        f"valid: {'true' if result.valid else 'false'}",
        f"target probability: {result.target_prob:.4f}",
        f"changed steps: {list(result.changed_indices)}",
        "changed KCs (reading order): ["
        + ", ".join(_kc_name(k, labels) for k in raw_order) + "]",
        f"total path distance before: {raw_distance:g}",
        "instruction path: "
        + " -> ".join(_kc_name(k, labels) for k in study_plan.ordered_kcs),
        f"total path distance after: {study_plan.total_path_distance:g}",
        "",
    ]
    text_path = out / "explanation.txt"
    _atomic_write_text(text_path, "\n".join(lines))
    manifest.add_output(text_path)

    if not args.no_figures:
        from . import figures
        fig_path = out / "loss_trace.png"
        figures.save_loss_trace(result, fig_path)
        manifest.add_output(fig_path)
    manifest.finish()
    sys.stdout.write("\n".join(lines))
    return 0


def _method_specs(args, seed: int):
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    inits = [i.strip() for i in args.inits.split(",") if i.strip()]
    specs = []
    for method in methods:
        if method == "ktcf":
            for init in inits:
                specs.append(("ktcf", init, _cf_config_defaults(args, seed, init)))
        elif method in ("wachter", "dice"):
            specs.append((method, "rand", _cf_config_defaults(args, seed, "rand")))
        else:
            raise KtcfError(f"unknown method {method!r}")
    return specs


def _cf_config_defaults(args, seed: int, init: str) -> CfConfig:
    return CfConfig(
        lambda_spar=args.lambda_spar, lambda_kc=args.lambda_kc,
        n_iter=args.n_iter, eta=args.eta, tau=args.tau, init=init, seed=seed)


def cmd_bench(args) -> int:
    out = _out_dir(args)
    manifest = _ManifestWriter("bench", args, out)
    dataset = load_dataset(args.dataset)
    graph = load_graph(args.graph)
    model = load_model(args.model)
    seed = _env_seed(args.seed)
    manifest.set_seed(seed)
    specs = _method_specs(args, seed)

    outcome = run_benchmark(dataset, model, graph, specs,
                            n_instances=args.n_instances,
                            fraction_incorrect=args.fraction_incorrect,
                            seed=seed)
    if outcome.selection.shortfall:
        print(f"warning: only {outcome.selection.n_eligible} eligible instances "
              f"(requested {args.n_instances})", file=sys.stderr)

    per_path = out / "per_instance.csv"
    agg_path = out / "aggregate.csv"
    table_path = out / "table.txt"
    write_per_instance_csv(outcome.per_instance, per_path)
    write_aggregate_csv(outcome.report, agg_path)
    table = format_table(outcome.report)
    _atomic_write_text(table_path, table)
    for p in (per_path, agg_path, table_path):
        manifest.add_output(p)
    if not args.no_figures:
        from . import figures
        fig_path = out / "benchmark_metrics.png"
        figures.save_benchmark_bars(outcome.report, fig_path)
        manifest.add_output(fig_path)
    manifest.finish()
    print(table, end="")
    if outcome.failures:
        print(f"({len(outcome.failures)} per-instance failures recorded as invalid)",
              file=sys.stderr)
    return 0


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    manifest = _ManifestWriter("ablate", args, out)
    dataset = load_dataset(args.dataset)
    graph = load_graph(args.graph)
    model = load_model(args.model)
    seed = _env_seed(args.seed)
    manifest.set_seed(seed)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    specs = _method_specs(args, seed)

    sweeps = run_ablation(dataset, model, graph, args.axis, values, specs,
                          n_instances=args.n_instances,
                          fraction_incorrect=args.fraction_incorrect, seed=seed)
    csv_path = out / f"ablation_{args.axis}.csv"
    write_ablation_csv(args.axis, sweeps, csv_path)
    manifest.add_output(csv_path)
    if not args.no_figures:
        from . import figures
        fig_path = out / f"ablation_{args.axis}.png"
        figures.save_ablation_lines(args.axis, sweeps, fig_path)
        manifest.add_output(fig_path)
    manifest.finish()
    for value, report in sweeps:
        print(f"=== {args.axis} = {value:g} ===")
        print(format_table(report), end="")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_cf_flags(p: argparse.ArgumentParser, with_init: bool = True):
    p.add_argument("--lambda-spar", type=float, default=CfConfig.lambda_spar)
    p.add_argument("--lambda-kc", type=float, default=CfConfig.lambda_kc)
    p.add_argument("--n-iter", type=int, default=CfConfig.n_iter)
    p.add_argument("--eta", type=float, default=CfConfig.eta)
    p.add_argument("--tau", type=float, default=CfConfig.tau)
    if with_init:
        p.add_argument("--init", choices=INIT_STRATEGIES, default=None)
        p.add_argument("--lambda-noise", type=float, default=CfConfig.lambda_noise)
        p.add_argument("--lambda-cc", type=float, default=CfConfig.lambda_cc)
        p.add_argument("--lambda-temp", type=float, default=CfConfig.lambda_temp)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ktcf",
        description="Actionable counterfactual explanations for knowledge tracing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset and KC graph")
    p.add_argument("--out", required=True)
    p.add_argument("--n-students", type=int, default=SyntheticConfig.n_students)
    p.add_argument("--n-kcs", type=int, default=SyntheticConfig.n_kcs)
    p.add_argument("--t-min", type=int, default=40)
    p.add_argument("--t-max", type=int, default=60)
    p.add_argument("--graph-style", choices=("random_tree_plus", "clustered"),
                   default="random_tree_plus")
    p.add_argument("--p-init", type=float, default=SyntheticConfig.p_init)
    p.add_argument("--learn-rate", type=float, default=SyntheticConfig.learn_rate)
    p.add_argument("--slip", type=float, default=SyntheticConfig.slip)
    p.add_argument("--guess", type=float, default=SyntheticConfig.guess)
    p.add_argument("--locality", type=float, default=SyntheticConfig.locality)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit the knowledge-tracing model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hidden-size", type=int, default=TrainConfig.hidden_size)
    p.add_argument("--learning-rate", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--max-epochs", type=int, default=TrainConfig.max_epochs)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="explain one student's target prediction")
    p.add_argument("--model", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--instance-id", type=int, required=True)
    p.add_argument("--method", choices=("ktcf", "wachter", "dice"), default="ktcf")
    p.add_argument("--kc-labels", default=None,
                   help="optional file of 'index name' lines for display names")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-figures", action="store_true")
    _add_cf_flags(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("bench", help="benchmark methods on selected instances")
    p.add_argument("--model", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--methods", default="ktcf,wachter,dice",
                   help="comma-separated subset of ktcf,wachter,dice")
    p.add_argument("--inits", default="rn",
                   help="comma-separated init strategies for the ktcf variants")
    p.add_argument("--n-instances", type=int, default=200)
    p.add_argument("--fraction-incorrect", type=float, default=0.45)
    p.add_argument("--single-worker", action="store_true", default=True,
                   help="kept for compatibility; the runner is single-worker")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-figures", action="store_true")
    _add_cf_flags(p, with_init=False)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="sweep one hyperparameter axis")
    p.add_argument("--model", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--axis", choices=ABLATION_AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--methods", default="ktcf")
    p.add_argument("--inits", default="rn")
    p.add_argument("--n-instances", type=int, default=200)
    p.add_argument("--fraction-incorrect", type=float, default=0.45)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-figures", action="store_true")
    _add_cf_flags(p, with_init=False)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:  # invalid flag combinations are usage errors
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except KtcfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
