"""Sparse-pose-guided toy diffusion.

Modules
-------
pose
    Skeleton specs, pose instances, editing, pose document and COCO I/O.
raster
    Disk/segment painting and Gaussian grids (compiled core, NumPy fallback).
spr
    Learnable spatial-pose raster and Gaussian heatmap targets.
kcl
    Keypoint text tokens and the gated attention-to-heatmap loss.
backbone
    Frozen toy denoiser plus trainable adapter and zero convolutions.
trainer
    Joint training loop, synthetic dataset, checkpointing.
sampler
    Deterministic DDIM sampling with classifier-free guidance.
service
    HTTP generation service with a serial job queue.
evaluation
    OKS/mAP scoring, prompt templates, centroid estimator.
experiment
    Paired-eta ablation producing attention-mass and mAP margins.
"""
from .backbone import (
    NoiseSchedule,
    SparsePoseModel,
    build_model,
    load_checkpoint,
    load_trained_model,
    make_schedule,
    save_checkpoint,
)
from .config import (
    FullConfig,
    ModelConfig,
    SamplingConfig,
    ScheduleConfig,
    TrainConfig,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from .evaluation import (
    PredictedInstance,
    PredictionSet,
    centroid_estimator,
    evaluate_generations,
    fill_prompt_template,
    load_predictions,
    oks,
    pose_map,
)
from .kcl import GatingConfig, augment_prompt, heatmap_loss
from .pose import (
    PoseError,
    PoseInstance,
    PoseSet,
    SkeletonSpec,
    default_skeleton,
    load_pose_document,
    load_skeleton_spec,
    parse_coco_keypoints,
    parse_pose_document,
    serialize_pose,
    skeleton_to_json,
)
from .sampler import AttentionMap, SampleRequest, ddim_timesteps, sample
from .spr import render_heatmaps, render_spatial_pose
from .synth import SyntheticSample, make_synthetic_dataset, make_synthetic_sample
from .trainer import TrainState, make_train_state, run_training, train_step

__version__ = "0.1.0"

__all__ = [
    "AttentionMap",
    "FullConfig",
    "GatingConfig",
    "ModelConfig",
    "NoiseSchedule",
    "PoseError",
    "PoseInstance",
    "PoseSet",
    "PredictedInstance",
    "PredictionSet",
    "SampleRequest",
    "SamplingConfig",
    "ScheduleConfig",
    "SkeletonSpec",
    "SparsePoseModel",
    "SyntheticSample",
    "TrainConfig",
    "TrainState",
    "augment_prompt",
    "build_model",
    "centroid_estimator",
    "config_from_dict",
    "config_to_dict",
    "ddim_timesteps",
    "default_skeleton",
    "evaluate_generations",
    "fill_prompt_template",
    "heatmap_loss",
    "load_checkpoint",
    "load_config",
    "load_pose_document",
    "load_predictions",
    "load_skeleton_spec",
    "load_trained_model",
    "make_schedule",
    "make_synthetic_dataset",
    "make_synthetic_sample",
    "make_train_state",
    "oks",
    "parse_coco_keypoints",
    "parse_pose_document",
    "pose_map",
    "render_heatmaps",
    "render_spatial_pose",
    "run_training",
    "sample",
    "save_checkpoint",
    "save_config",
    "serialize_pose",
    "skeleton_to_json",
    "train_step",
]
