"""The data-scientist SDK: federation discovery, round orchestration,
FedAvg aggregation, checkpoints, metrics, and runtime reporting."""

from .aggregate import fedavg_aggregate
from .experiment import (
    Experiment,
    ExperimentConfig,
    ExperimentState,
    FederatedDataset,
    RoundRecord,
    StrategyConfig,
    load_experiment_config,
)
from .checkpoint import save_checkpoint, load_checkpoint
from .metrics import RuntimeBreakdown, emit_metrics, load_metric_log, runtime_report

__all__ = [
    "fedavg_aggregate",
    "Experiment", "ExperimentConfig", "ExperimentState", "FederatedDataset",
    "RoundRecord", "StrategyConfig", "load_experiment_config",
    "save_checkpoint", "load_checkpoint",
    "RuntimeBreakdown", "emit_metrics", "load_metric_log", "runtime_report",
]
