import csv
import json
import os
import sys

import numpy as np
import pytest

from ktcf.cli import main
from ktcf.data_io import Dataset, save_dataset
from ktcf.kc_graph import KcGraph, save_graph
from ktcf.kt_core import LearningHistory, save_model

sys.path.insert(0, os.path.dirname(__file__))
from test_cf_engine import toy_model  # noqa: E402


@pytest.fixture(scope="module")
def toy_pipeline(tmp_path_factory):
    """Hand-built model + tiny handcrafted dataset: flips provably work."""
    root = tmp_path_factory.mktemp("toy")
    model = toy_model(k=4, gain=[0.15, 0.3, 0.45, 0.6])
    rng = np.random.default_rng(0)
    students = []
    for i in range(10):
        t_len = int(rng.integers(8, 12))
        kcs = rng.integers(0, 4, t_len)
        responses = np.zeros(t_len, dtype=int)
        responses[rng.uniform(size=t_len) < 0.25] = 1
        responses[-1] = 0
        students.append(LearningHistory(kcs, responses, student_id=i))
    dataset = Dataset(4, tuple(students))
    graph = KcGraph(n_nodes=4, edges=((0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)))
    save_model(model, root / "model.npz")
    save_dataset(dataset, root / "dataset.jsonl")
    save_graph(graph, root / "graph.txt")
    return root


@pytest.fixture(scope="module")
def trained_pipeline(tmp_path_factory):
    """Small end-to-end gen-data + train run through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--n-students", "120",
                 "--n-kcs", "10", "--t-min", "8", "--t-max", "12",
                 "--seed", "11"]) == 0
    assert main(["train", "--dataset", str(root / "data" / "dataset.jsonl"),
                 "--out", str(root / "model"), "--max-epochs", "4",
                 "--seed", "11"]) == 0
    return root


def test_gen_data_outputs_and_manifest(trained_pipeline):
    data = trained_pipeline / "data"
    assert (data / "dataset.jsonl").exists()
    assert (data / "graph.txt").exists()
    manifest = json.loads((data / "run_manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["seed_used"] == 11
    assert len(list(data.glob("run_manifest*"))) == 1


def test_train_outputs(trained_pipeline):
    model_dir = trained_pipeline / "model"
    assert (model_dir / "model.npz").exists()
    report = json.loads((model_dir / "training_report.json").read_text())
    assert 0.0 <= report["holdout_auc"] <= 1.0
    assert (model_dir / "training_curves.png").stat().st_size > 0


def test_explain_golden_output(toy_pipeline, tmp_path):
    out = tmp_path / "expl"
    code = main(["explain", "--model", str(toy_pipeline / "model.npz"),
                 "--graph", str(toy_pipeline / "graph.txt"),
                 "--dataset", str(toy_pipeline / "dataset.jsonl"),
                 "--instance-id", "0", "--method", "ktcf", "--init", "rn",
                 "--out", str(out), "--seed", "3"])
    assert code == 0
    text = (out / "explanation.txt").read_text()
    assert "valid: true" in text
    assert "changed KCs" in text
    record = json.loads((out / "explanation.json").read_text())
    assert record["valid"] is True
    assert record["plan_total_path_distance"] <= record["raw_total_path_distance"]
    assert record["changed_indices"]
    assert (out / "loss_trace.png").exists()


def test_explain_kc_labels(toy_pipeline, tmp_path):
    labels = tmp_path / "labels.txt"
    labels.write_text("0 Decimal Division\n1 Fractions\n2 Ratios\n3 Percentages\n")
    out = tmp_path / "expl"
    code = main(["explain", "--model", str(toy_pipeline / "model.npz"),
                 "--graph", str(toy_pipeline / "graph.txt"),
                 "--dataset", str(toy_pipeline / "dataset.jsonl"),
                 "--instance-id", "0", "--kc-labels", str(labels),
                 "--out", str(out), "--seed", "3"])
    assert code == 0
    text = (out / "explanation.txt").read_text()
    names = ("Decimal Division", "Fractions", "Ratios", "Percentages")
    assert any(name in text for name in names)
    assert "kc_" not in text  # every index has a label


def test_explain_rejects_baseline_init_combo(toy_pipeline, tmp_path, capsys):
    code = main(["explain", "--model", str(toy_pipeline / "model.npz"),
                 "--graph", str(toy_pipeline / "graph.txt"),
                 "--dataset", str(toy_pipeline / "dataset.jsonl"),
                 "--instance-id", "0", "--method", "wachter", "--init", "rn",
                 "--out", str(tmp_path / "x")])
    assert code == 2
    assert "usage error" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(toy_pipeline, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["bench", "--model", str(toy_pipeline / "model.npz"),
              "--definitely-not-a-flag", "1", "--out", str(tmp_path / "x")])
    assert exc.value.code == 2


def test_bench_outputs_and_rerun_determinism(toy_pipeline, tmp_path):
    def run(out):
        return main(["bench", "--model", str(toy_pipeline / "model.npz"),
                     "--graph", str(toy_pipeline / "graph.txt"),
                     "--dataset", str(toy_pipeline / "dataset.jsonl"),
                     "--methods", "ktcf,wachter,dice", "--inits", "rn,gs",
                     "--n-instances", "5", "--n-iter", "40",
                     "--out", str(out), "--seed", "9", "--no-figures"])

    assert run(tmp_path / "a") == 0
    assert run(tmp_path / "b") == 0

    def strip_times(path, column):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            row.pop(column, None)
        return rows

    a = strip_times(tmp_path / "a" / "per_instance.csv", "time_s")
    b = strip_times(tmp_path / "b" / "per_instance.csv", "time_s")
    assert a == b

    def agg_rows(path):
        with open(path, newline="") as fh:
            return [row for row in csv.DictReader(fh) if row["metric"] != "time_s"]

    assert agg_rows(tmp_path / "a" / "aggregate.csv") == \
        agg_rows(tmp_path / "b" / "aggregate.csv")

    methods = {row["method"] for row in a}
    assert methods == {"KTCF-rn", "KTCF-gs", "Wachter-rand", "DiCE-rand"}


def test_bench_no_eligible_instances_fails_with_rule(tmp_path, capsys):
    # all-correct students: nothing is explainable
    students = tuple(LearningHistory(np.array([0, 1, 2]), np.array([1, 1, 1]),
                                     student_id=i) for i in range(3))
    save_dataset(Dataset(4, students), tmp_path / "ds.jsonl")
    model = toy_model(k=4)
    save_model(model, tmp_path / "model.npz")
    graph = KcGraph(n_nodes=4, edges=((0, 1, 1.0),))
    save_graph(graph, tmp_path / "graph.txt")
    code = main(["bench", "--model", str(tmp_path / "model.npz"),
                 "--graph", str(tmp_path / "graph.txt"),
                 "--dataset", str(tmp_path / "ds.jsonl"),
                 "--out", str(tmp_path / "out"), "--seed", "0"])
    assert code != 0
    err = capsys.readouterr().err
    assert "incorrect" in err and "0.5" in err


def test_ablate_outputs(toy_pipeline, tmp_path):
    out = tmp_path / "abl"
    code = main(["ablate", "--model", str(toy_pipeline / "model.npz"),
                 "--graph", str(toy_pipeline / "graph.txt"),
                 "--dataset", str(toy_pipeline / "dataset.jsonl"),
                 "--axis", "lambda_noise", "--values", "0.05,0.5",
                 "--methods", "ktcf", "--inits", "rn",
                 "--n-instances", "4", "--n-iter", "20",
                 "--out", str(out), "--seed", "2"])
    assert code == 0
    with open(out / "ablation_lambda_noise.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    values = {row["axis_value"] for row in rows}
    assert values == {"0.05", "0.5"}
    assert all(row["axis"] == "lambda_noise" for row in rows)
    assert (out / "ablation_lambda_noise.png").exists()
    assert (out / "run_manifest.json").exists()


def test_env_seed_fallback(toy_pipeline, tmp_path, monkeypatch):
    def run(out, extra):
        return main(["explain", "--model", str(toy_pipeline / "model.npz"),
                     "--graph", str(toy_pipeline / "graph.txt"),
                     "--dataset", str(toy_pipeline / "dataset.jsonl"),
                     "--instance-id", "1", "--out", str(out),
                     "--no-figures", *extra])

    monkeypatch.setenv("KTCF_SEED", "21")
    assert run(tmp_path / "via_env", []) == 0
    monkeypatch.delenv("KTCF_SEED")
    assert run(tmp_path / "via_flag", ["--seed", "21"]) == 0
    a = json.loads((tmp_path / "via_env" / "explanation.json").read_text())
    b = json.loads((tmp_path / "via_flag" / "explanation.json").read_text())
    for key in ("counterfactual_responses", "plan_kcs", "valid"):
        assert a[key] == b[key]


def test_explain_missing_instance_errors(toy_pipeline, tmp_path, capsys):
    code = main(["explain", "--model", str(toy_pipeline / "model.npz"),
                 "--graph", str(toy_pipeline / "graph.txt"),
                 "--dataset", str(toy_pipeline / "dataset.jsonl"),
                 "--instance-id", "999", "--out", str(tmp_path / "x")])
    assert code == 1
    assert "999" in capsys.readouterr().err
