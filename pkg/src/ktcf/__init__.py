"""Actionable counterfactual explanations for knowledge-tracing models.

Given a trained recurrent tracer, a student's learning history whose final
(target) concept was answered incorrectly, and an undirected concept
relation graph, this package searches for a minimal, fully actionable set
of response flips that would make the model predict the target correct,
then orders the flipped concepts into a study path over the graph.
"""

__version__ = "0.1.0"

from .cf_engine import (CfConfig, CfResult, actionability_mask, baseline_dice_like,
                        baseline_wachter, generate, initialize, ktcf_loss, project)
from .data_io import Dataset, SyntheticConfig, generate_dataset, load_dataset, save_dataset
from .errors import ConfigError, FormatError, InputError, KtcfError, NoActionableChangeError
from .evaluation import (MetricsReport, compute_metrics, run_ablation, run_benchmark,
                         select_instances)
from .kc_graph import KcGraph, load_graph, save_graph
from .kt_core import (KtModel, LearningHistory, TrainConfig, TrainReport,
                      encode_interaction, forward, grad_responses, load_model,
                      predict_target, save_model, train)
from .planner import InstructionPlan, ordered_total_distance, plan

__all__ = [
    "CfConfig", "CfResult", "Dataset", "InstructionPlan", "KcGraph", "KtModel",
    "LearningHistory", "MetricsReport", "SyntheticConfig", "TrainConfig",
    "TrainReport", "KtcfError", "InputError", "ConfigError", "FormatError",
    "NoActionableChangeError", "actionability_mask", "baseline_dice_like",
    "baseline_wachter", "compute_metrics", "encode_interaction", "forward",
    "generate", "generate_dataset", "grad_responses", "initialize", "ktcf_loss",
    "load_dataset", "load_graph", "load_model", "ordered_total_distance", "plan",
    "predict_target", "project", "run_ablation", "run_benchmark", "save_dataset",
    "save_graph", "save_model", "select_instances", "train",
]
