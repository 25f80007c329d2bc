"""Hierarchical variational graph recurrent autoencoder for anomaly detection in dynamic networks."""

from .bench import InjectionSpec, SynthSpec, generate_synthetic, inject_anomalies, run_experiment
from .detection import DetectionVerdict, Thresholds, detect, fit_threshold, score_stream
from .estimator import HVGRAEDetector, check_dynamic_input
from .graph import DynNetwork, IngestionError, Snapshot, load_dataset, save_dataset, split_train_test
from .model import HVGRAE, ModelConfig, load_checkpoint, save_checkpoint
from .training import NumericalError, TrainConfig, TrainLog, train

__version__ = "0.1.0"

__all__ = [
    "DetectionVerdict",
    "DynNetwork",
    "HVGRAE",
    "HVGRAEDetector",
    "IngestionError",
    "InjectionSpec",
    "ModelConfig",
    "NumericalError",
    "Snapshot",
    "SynthSpec",
    "Thresholds",
    "TrainConfig",
    "TrainLog",
    "check_dynamic_input",
    "detect",
    "fit_threshold",
    "generate_synthetic",
    "inject_anomalies",
    "load_checkpoint",
    "load_dataset",
    "run_experiment",
    "save_checkpoint",
    "save_dataset",
    "score_stream",
    "split_train_test",
    "train",
]
