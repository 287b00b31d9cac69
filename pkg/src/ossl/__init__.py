"""Open-set self-learning: adapt a closed-set classifier on an unlabeled
test set that mixes known and never-seen classes, then evaluate how well
the result separates them."""

__version__ = "0.1.0"

from .adapt import AdaptConfig, AdaptTrace, EvalOptions, run_ossl
from .data import UNKNOWN, Dataset, DatasetSpec, generate, load_dataset, save_dataset
from .errors import (ConfigError, DataError, NumericsError, OsslError,
                     TrainingError, ValidationError)
from .metrics import ScoredPredictions, auroc, calibrate_threshold, closed_set_accuracy, macro_f1
from .model import ModelBundle, SourceConfig, StartingPoint, train_starting_point
from .selfmatch import Partition, assemble_objective, compute_weights, partition_test_set

__all__ = [
    "AdaptConfig", "AdaptTrace", "EvalOptions", "run_ossl",
    "UNKNOWN", "Dataset", "DatasetSpec", "generate", "load_dataset", "save_dataset",
    "ConfigError", "DataError", "NumericsError", "OsslError",
    "TrainingError", "ValidationError",
    "ScoredPredictions", "auroc", "calibrate_threshold", "closed_set_accuracy", "macro_f1",
    "ModelBundle", "SourceConfig", "StartingPoint", "train_starting_point",
    "Partition", "assemble_objective", "compute_weights", "partition_test_set",
]
