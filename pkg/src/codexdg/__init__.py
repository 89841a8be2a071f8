"""Multi-expert domain generalization with learned inter-domain affinity."""

from .config import ExperimentConfig, load_config
from .estimator import CoDExClassifier, CoDExSegmenter
from .evaluation import RunReport, affinity_proximity_correlation, evaluate, oracle_eval
from .exceptions import (
    CheckpointError,
    CodexError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    ModeError,
    NumericError,
    ParameterError,
)
from .losses import LossConfig
from .metrics import metric_avg_acc, metric_miou, metric_oa
from .model import BackboneConfig, ModelBundle, init_bundle, load_bundle, mixture_predict, save_bundle
from .optim import Adam, OptimConfig
from .pipeline import run_experiment
from .synthbench import BenchmarkConfig, Dataset, build_benchmark, generate_domains
from .trainer import train_baseline, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "BackboneConfig",
    "BenchmarkConfig",
    "CheckpointError",
    "CoDExClassifier",
    "CoDExSegmenter",
    "CodexError",
    "ConfigError",
    "ContractError",
    "DataError",
    "Dataset",
    "DimensionError",
    "ExperimentConfig",
    "LossConfig",
    "ModeError",
    "ModelBundle",
    "NumericError",
    "OptimConfig",
    "ParameterError",
    "RunReport",
    "affinity_proximity_correlation",
    "build_benchmark",
    "evaluate",
    "generate_domains",
    "init_bundle",
    "load_bundle",
    "load_config",
    "metric_avg_acc",
    "metric_miou",
    "metric_oa",
    "mixture_predict",
    "oracle_eval",
    "run_experiment",
    "save_bundle",
    "train_baseline",
    "train_stage1",
    "train_stage2",
]
