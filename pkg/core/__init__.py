"""Keypoint-selected scene-coordinate camera relocalization core package."""

from .errors import (
    ErrorInfo,
    RelocError,
    InvalidConfig,
    ParseError,
    UnknownImage,
    LocalizationError,
    InsufficientKeypoints,
)
from .geometry import CameraIntrinsics, ScenePose, project, project_points, backproject, pose_errors
from .scene import SceneModel, Heatmap, parse_scene_model, load_scene_model, reference_heatmap
from .keypoints import Keypoint, Correspondence, CoordMap, KeypointParams, nms_select, gather_correspondences
from .losses import LossWeights, loss_sim, loss_rep, loss_3d, loss_all
from .regressor import Regressor, RegressorConfig, load_checkpoint, save_checkpoint
from .solver import PoseEstimate, RansacConfig, p3p_solve, dlt_solve, refine_pose, ransac_pnp
from .synthetic import SynthSceneSpec, SyntheticScene, generate_scene, render_image
from .training import TrainConfig, train_staged
from .evaluation import LocalizationReport, evaluate_localization

__all__ = [
    "ErrorInfo",
    "RelocError",
    "InvalidConfig",
    "ParseError",
    "UnknownImage",
    "LocalizationError",
    "InsufficientKeypoints",
    "CameraIntrinsics",
    "ScenePose",
    "project",
    "project_points",
    "backproject",
    "pose_errors",
    "SceneModel",
    "Heatmap",
    "parse_scene_model",
    "load_scene_model",
    "reference_heatmap",
    "Keypoint",
    "Correspondence",
    "CoordMap",
    "KeypointParams",
    "nms_select",
    "gather_correspondences",
    "LossWeights",
    "loss_sim",
    "loss_rep",
    "loss_3d",
    "loss_all",
    "Regressor",
    "RegressorConfig",
    "load_checkpoint",
    "save_checkpoint",
    "PoseEstimate",
    "RansacConfig",
    "p3p_solve",
    "dlt_solve",
    "refine_pose",
    "ransac_pnp",
    "SynthSceneSpec",
    "SyntheticScene",
    "generate_scene",
    "render_image",
    "TrainConfig",
    "train_staged",
    "LocalizationReport",
    "evaluate_localization",
]
