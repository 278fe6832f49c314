"""Desk-scale lab for confidence-balanced learning from noisy web labels.

Pretrain a small sigmoid-output classifier on noisy labels, read self labels
and per-sample confidence out of it (optionally smoothing them over a cosine
k-NN feature graph), then finetune with a per-sample blend of label-supervised
and self-supervised losses. Calibration metrics score the confidence quality.
"""

from .datasets import (
    LabeledSample,
    SyntheticDataset,
    VerificationSet,
    build_verification_set,
    class_centers,
    generate_clusters,
    generate_train_test,
    inject_noise,
    load_dataset,
    load_verification,
    save_dataset,
    save_verification,
)
from .net import (
    GradientCheckReport,
    Gradients,
    LossBreakdown,
    LossSpec,
    MlpModel,
    backward,
    forward,
    gradient_check,
    init_model,
    load_checkpoint,
    load_model,
    loss_combined,
    loss_consistency,
    loss_entropy_reg,
    loss_label_smoothing,
    loss_self,
    loss_web,
    save_checkpoint,
)
from .train import (
    StageOneArtifacts,
    TrainConfig,
    TrainResult,
    TrainingDiverged,
    class_weights,
    extract,
    finetune,
    finetune_constant,
    lr_at,
    mixup_batch,
    pretrain,
    sgd_step,
    train_consistency_baseline,
)
from .graph import KnnGraph, build_knn, gba_smooth, smooth_artifacts
from .metrics import (
    CalibrationReport,
    accuracy,
    calibration_report,
    ece,
    emit_reliability_csv,
    mse,
    oce,
    reliability_trend,
    sav_harness,
)
from .estimators import GraphLabelSmoother, SccClassifier, SigmoidMlpClassifier

__version__ = "0.1.0"
