"""Hierarchical pessimistic off-policy optimization for multi-task linear bandits."""

from .data import HierModelConfig, LoggedDataset, LoggedRecord, read_dataset, write_dataset
from .policy import (
    FlatOPO,
    HierOPO,
    LearnedPolicy,
    OracleOPO,
    RewardEstimate,
    SingleTaskOPO,
    fit_flatopo,
    fit_hieropo,
    fit_oracleopo,
    fit_single_task,
)
from .posterior import (
    compute_task_statistics,
    conditional_task_posterior,
    hyper_posterior,
    infer,
    joint_gaussian_oracle,
    marginal_task_posterior,
)

__version__ = "0.1.0"

__all__ = [
    "FlatOPO",
    "HierModelConfig",
    "HierOPO",
    "LearnedPolicy",
    "LoggedDataset",
    "LoggedRecord",
    "OracleOPO",
    "RewardEstimate",
    "SingleTaskOPO",
    "compute_task_statistics",
    "conditional_task_posterior",
    "fit_flatopo",
    "fit_hieropo",
    "fit_oracleopo",
    "fit_single_task",
    "hyper_posterior",
    "infer",
    "joint_gaussian_oracle",
    "marginal_task_posterior",
    "read_dataset",
    "write_dataset",
]
