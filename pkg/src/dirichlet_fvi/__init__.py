"""Dirichlet-output classifiers trained by function-space variational
inference, with calibration and uncertainty reporting."""

from .calibration import CalibrationReport, PredictionRecord, auroc, ece, reliability_data, uncertainty_report
from .data import ClusterSpec, Dataset, gen_clusters
from .exceptions import ConfigurationError, DataError, DomainError, TrainingError
from .fsvi import (
    DeepEnsembleClassifier,
    FsviConfig,
    FunctionalVIClassifier,
    MCDropoutClassifier,
    StandardClassifier,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationReport",
    "ClusterSpec",
    "ConfigurationError",
    "DataError",
    "Dataset",
    "DeepEnsembleClassifier",
    "DomainError",
    "FsviConfig",
    "FunctionalVIClassifier",
    "MCDropoutClassifier",
    "PredictionRecord",
    "StandardClassifier",
    "TrainingError",
    "auroc",
    "ece",
    "gen_clusters",
    "reliability_data",
    "uncertainty_report",
]
