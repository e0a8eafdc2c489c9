"""Deterministic simulator for two-stage federated transfer learning.

A small CNN is trained across simulated clients with size-weighted weight
averaging; stage-one weights are persisted and transferred into stage
two, and both stages are scored with confusion-matrix metrics, ROC
curves, and AUC.
"""

from .data import (
    LabeledDataset,
    PartitionScheme,
    build_stage_datasets,
    load_pgm,
    partition_clients,
    resize_bilinear,
    save_pgm,
    split_train_test,
    synth_dataset,
)
from .federated import (
    FedConfig,
    RoundRecord,
    StageOrderError,
    StageResult,
    SynthSpec,
    centralized_train,
    federated_average,
    run_stage,
    run_two_stage,
    train_client,
)
from .layers import LayerGrads, gradient_check, sgd_step
from .lenet import (
    Batch,
    ModelWeights,
    forward,
    init_weights,
    load_weights,
    save_weights,
    train_batch,
    train_epoch,
    weights_checksum,
)
from .metrics import (
    ConfusionCounts,
    EvalMeta,
    EvalReport,
    UndefinedMetricError,
    auc,
    confusion_at_threshold,
    evaluate,
    precision,
    roc_curve,
    sensitivity,
    specificity,
)

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "ConfusionCounts",
    "EvalMeta",
    "EvalReport",
    "FedConfig",
    "LabeledDataset",
    "LayerGrads",
    "ModelWeights",
    "PartitionScheme",
    "RoundRecord",
    "StageOrderError",
    "StageResult",
    "SynthSpec",
    "UndefinedMetricError",
    "auc",
    "build_stage_datasets",
    "centralized_train",
    "confusion_at_threshold",
    "evaluate",
    "federated_average",
    "forward",
    "gradient_check",
    "init_weights",
    "load_pgm",
    "load_weights",
    "partition_clients",
    "precision",
    "resize_bilinear",
    "roc_curve",
    "run_stage",
    "run_two_stage",
    "save_pgm",
    "save_weights",
    "sensitivity",
    "sgd_step",
    "specificity",
    "split_train_test",
    "synth_dataset",
    "train_batch",
    "train_client",
    "train_epoch",
    "weights_checksum",
]
