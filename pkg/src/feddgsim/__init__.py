"""Simulation toolkit for federated domain generalization.

Partitions multi-domain data over any number of clients with tunable
domain heterogeneity, trains small numpy models with federated and
domain-generalization objectives, and measures dataset difficulty.
"""

from .aggregation import aggregate_fedavg, aggregate_fedgma, project_simplex
from .config import ConfigError, ExperimentConfig, SweepSpec, load_config
from .dataspace import (
    CsvSchema,
    DomainDataset,
    ShiftRecipe,
    SplitSpec,
    apply_split,
    generate_synthetic,
    load_csv,
    split_dg_test,
    write_csv,
)
from .fedsim import RunRecord, SimulationError, difficulty_report, run_experiment, run_round
from .metrics import DifficultyReport, SelectionPolicy, compute_r_dg, compute_r_fl, evaluate, select_model
from .model import ModelSpec, forward, init_params, loss_and_grad
from .objectives import DroWeights, PenaltyConfig, objective_and_grad
from .partition import (
    DirichletInfeasibleError,
    PartitionPlan,
    brute_force_optimal_variance,
    check_constraints,
    materialize,
    partition_dirichlet,
    partition_heterogeneous,
    partition_shards,
)

__version__ = "0.1.0"

__all__ = [
    "aggregate_fedavg",
    "aggregate_fedgma",
    "project_simplex",
    "ConfigError",
    "ExperimentConfig",
    "SweepSpec",
    "load_config",
    "CsvSchema",
    "DomainDataset",
    "ShiftRecipe",
    "SplitSpec",
    "apply_split",
    "generate_synthetic",
    "load_csv",
    "split_dg_test",
    "write_csv",
    "RunRecord",
    "SimulationError",
    "difficulty_report",
    "run_experiment",
    "run_round",
    "DifficultyReport",
    "SelectionPolicy",
    "compute_r_dg",
    "compute_r_fl",
    "evaluate",
    "select_model",
    "ModelSpec",
    "forward",
    "init_params",
    "loss_and_grad",
    "DroWeights",
    "PenaltyConfig",
    "objective_and_grad",
    "DirichletInfeasibleError",
    "PartitionPlan",
    "brute_force_optimal_variance",
    "check_constraints",
    "materialize",
    "partition_dirichlet",
    "partition_heterogeneous",
    "partition_shards",
]
