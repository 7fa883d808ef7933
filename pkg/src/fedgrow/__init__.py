"""Desk-scale simulator for growing a shared transformer from heterogeneous
pre-trained small models via local and shared linear growth operators."""

from .config import ExperimentConfig, OperatorSpec, TaskSpec, TrainSpec, build_suite, validate_config
from .data import LabeledDataset, PartitionSpec, dirichlet_partition, make_synthetic_task
from .ligo import GrowthOperator, apply, count_operator_params, init_operator, operator_count
from .metrics import cross_client_stats, evaluate, intermediate_similarity
from .model import ModelConfig, ParamSet, count_params, forward, init_params
from .server import RoundLedger, aggregate, comm_cost_report, run_rounds
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "GrowthOperator",
    "LabeledDataset",
    "ModelConfig",
    "OperatorSpec",
    "ParamSet",
    "PartitionSpec",
    "RoundLedger",
    "Tape",
    "TaskSpec",
    "Tensor",
    "TrainSpec",
    "aggregate",
    "apply",
    "backward",
    "build_suite",
    "comm_cost_report",
    "count_operator_params",
    "count_params",
    "cross_client_stats",
    "dirichlet_partition",
    "evaluate",
    "forward",
    "init_operator",
    "init_params",
    "intermediate_similarity",
    "make_synthetic_task",
    "operator_count",
    "run_rounds",
    "validate_config",
    "__version__",
]
