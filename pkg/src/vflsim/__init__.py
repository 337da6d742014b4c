"""Simulator for vertically federated training under crash faults.

Two trainable strategies over the same partitioned data, fault model, and
communication accounting: a decoupled protocol with redundant aggregating
hosts where only forward activations ever cross party boundaries, and an
end-to-end split-network baseline with configurable fault timeout policies.
"""

from .config import (
    DatasetConfig,
    ExperimentConfig,
    FaultConfig,
    ModelConfig,
    OutputConfig,
    TrainingConfig,
    apply_overrides,
    derive_seed,
    load_config,
    parse_config,
    save_config,
)
from .errors import ConfigError, DataFormatError, VflsimError
from .estimators import DVFLClassifier, SplitNNClassifier
from .experiment import (
    RunMetrics,
    cached_run,
    comm_cost,
    execute_dvfl,
    execute_splitnn,
    median_two_sigma,
    run_dvfl,
    run_experiment,
    run_splitnn,
    sweep,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DVFLClassifier",
    "DataFormatError",
    "DatasetConfig",
    "ExperimentConfig",
    "FaultConfig",
    "ModelConfig",
    "OutputConfig",
    "RunMetrics",
    "SplitNNClassifier",
    "TrainingConfig",
    "VflsimError",
    "apply_overrides",
    "cached_run",
    "comm_cost",
    "derive_seed",
    "execute_dvfl",
    "execute_splitnn",
    "load_config",
    "median_two_sigma",
    "parse_config",
    "run_dvfl",
    "run_experiment",
    "run_splitnn",
    "save_config",
    "sweep",
    "__version__",
]
