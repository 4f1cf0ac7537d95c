"""Baseline CNN vs EfficientNet transfer learning for four-class fundus image classification."""

from .dataset import (DatasetIndex, DistributionReport, SplitIndex, class_distribution,
                      load_image, read_manifest, scan_dataset, stratified_split, write_manifest)
from .evaluation import (ClassificationReport, ClassMetrics, ConfusionMatrix, build_report,
                         confusion, overall_accuracy, per_class_metrics, predict_labels)
from .models import (FreezePolicy, ModelSpec, build_baseline_cnn, build_transfer_model,
                     forward)
from .training import Checkpoint, TrainConfig, TrainingHistory, TrainResult, resume, train
from .weights import WeightBundle, fetch_pretrained

__version__ = "0.1.0"

__all__ = [
    "DatasetIndex", "DistributionReport", "SplitIndex", "class_distribution", "load_image",
    "read_manifest", "scan_dataset", "stratified_split", "write_manifest",
    "ClassificationReport", "ClassMetrics", "ConfusionMatrix", "build_report", "confusion",
    "overall_accuracy", "per_class_metrics", "predict_labels",
    "FreezePolicy", "ModelSpec", "build_baseline_cnn", "build_transfer_model", "forward",
    "Checkpoint", "TrainConfig", "TrainingHistory", "TrainResult", "resume", "train",
    "WeightBundle", "fetch_pretrained",
]
