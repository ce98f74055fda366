"""CNN relative pose regressor, its loss, training loop and metrics."""

from .model import (
    ConfigError,
    EstimatorConfig,
    FingerprintError,
    ModelWeights,
    build_estimator,
    forward,
    predict,
    recalibrate_bn,
)
from .training import (
    EmptyDatasetError,
    EpochRecord,
    TrainConfig,
    TrainingDivergedError,
    estimate_pose,
    evaluate,
    labels_to_targets,
    loss_total,
    outputs_to_pose,
    pose_errors,
    train,
    weighted_loss,
)
