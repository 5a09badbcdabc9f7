"""Adaptive semi-supervised change-detection training on synthetic rasters."""

from .ema_gate import EmaGateConfig, GateDecision, gate_and_update, uncertainty_delta, update_probability
from .fusion import (
    FusionDecision,
    Region,
    ada_fuse_batch,
    choose_donor,
    composite_label,
    composite_pair,
    integral_image,
    max_uncertainty_region,
    sample_window_size,
)
from .model import (
    ModelParams,
    OptimizerState,
    backward,
    ema_update,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from .numerics import (
    IGNORE,
    ConfusionCounts,
    ImagePair,
    confusion,
    cross_entropy,
    iou_changed,
    load_raster,
    oa,
    save_raster,
    softmax,
)
from .schedule import RampConfig, lambda_weight, learning_rate
from .synthdata import DatasetSplit, SceneSpec, generate_pair, make_splits, strong_augment, weak_augment
from .trainer import MetricsRecord, TrainerConfig, TrainState, evaluate, pseudo_label, run, train_step
from .uncertainty import (
    ClassWeights,
    batch_class_weights,
    margin_map,
    per_class_entropy,
    rebalanced_entropy,
    sample_uncertainty,
    score_map,
    uncertainty_map,
)

__version__ = "0.1.0"
