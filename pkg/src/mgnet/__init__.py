"""Goal-conditioned pedestrian bounding-box trajectory prediction.

The package predicts future bounding boxes (cx, cy, w, h) from an observed
window: recurrent and attention encoders summarize the past, a conditional
VAE samples a latent intent, a multi-stage goal evaluator proposes coarse and
fine waypoint features, and a recursive decoder rolls the trajectory out step
by step against those goals.
"""

from .data import (
    BoundingBox,
    ConfigurationError,
    EmptyDatasetError,
    NormTransform,
    ParseError,
    SplitSpec,
    StageGoalTargets,
    Track,
    TrajectoryBatch,
    TrajectoryWindow,
    boxes_to_corners,
    corners_to_cxcywh,
    cxcywh_to_corners,
    denormalize_window,
    generate_synthetic,
    load_tracks,
    normalize_window,
    split_dataset,
    stage_times,
    window_tracks,
    write_tracks_jsonl,
)
from .evaluation import (
    MetricReport,
    ModelPredictor,
    c_mse,
    cf_mse,
    constant_velocity_baseline,
    evaluate,
    evaluate_checkpoints,
    linear_baseline,
    mse_bbox,
    plot_trajectories,
    prepare_splits,
    run_ablation,
    run_exploration,
)
from .network import MGNet, ModelConfig, ModelOutput
from .training import (
    TrainConfig,
    TrainResult,
    fit,
    load_checkpoint,
    save_checkpoint,
    train_model,
)

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "ConfigurationError",
    "EmptyDatasetError",
    "MGNet",
    "MetricReport",
    "ModelConfig",
    "ModelOutput",
    "ModelPredictor",
    "NormTransform",
    "ParseError",
    "SplitSpec",
    "StageGoalTargets",
    "Track",
    "TrainConfig",
    "TrainResult",
    "TrajectoryBatch",
    "TrajectoryWindow",
    "boxes_to_corners",
    "c_mse",
    "cf_mse",
    "constant_velocity_baseline",
    "corners_to_cxcywh",
    "cxcywh_to_corners",
    "denormalize_window",
    "evaluate",
    "evaluate_checkpoints",
    "fit",
    "generate_synthetic",
    "linear_baseline",
    "load_checkpoint",
    "load_tracks",
    "mse_bbox",
    "normalize_window",
    "plot_trajectories",
    "prepare_splits",
    "run_ablation",
    "run_exploration",
    "save_checkpoint",
    "split_dataset",
    "stage_times",
    "train_model",
    "window_tracks",
    "write_tracks_jsonl",
]
