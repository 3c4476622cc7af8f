"""Intrinsic image decomposition on coloured point clouds built from RGB-D."""

from .autodiff import Adam, Tensor
from .data import IntrinsicSample, SceneSpec, generate_dataset, load_dataset, load_sample, render_synthetic
from .geometry import (
    CameraIntrinsics,
    NormalField,
    PointCloud,
    build_point_cloud,
    default_intrinsics,
    estimate_normals,
    perturb_depth,
    voxel_downsample,
)
from .model import (
    DecompositionResult,
    ModelWeights,
    TrainConfig,
    decompose,
    init_weights,
    load_weights,
    save_weights,
    train_stage1,
    train_stage2,
)

__version__ = "0.1.0"
