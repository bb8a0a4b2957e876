"""Learnable sample selection for per-object 3D regression grids."""

from .gumbel import GumbelNoise, SoftMap, gumbel_max, gumbel_softmax, gumbel_top_k, sample_gumbel
from .kitti import CameraIntrinsics, KittiFormatError, Object3DLabel, parse_calib, parse_label_line, serialize_label
from .losses import CellPredictions, LossBreakdown, TrainState, masked_total_loss, warmup_gate
from .mixup import MixConfig, MixUp3D, Scene, augment_dataset, check_compatible
from .selection import (
    DividerResult,
    LearnableSampleSelector,
    SampleMap,
    build_sample_map,
    relative_distance_divide,
    select_infer,
    select_train,
)

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "CellPredictions",
    "DividerResult",
    "GumbelNoise",
    "KittiFormatError",
    "LearnableSampleSelector",
    "LossBreakdown",
    "MixConfig",
    "MixUp3D",
    "Object3DLabel",
    "SampleMap",
    "Scene",
    "SoftMap",
    "TrainState",
    "augment_dataset",
    "build_sample_map",
    "check_compatible",
    "gumbel_max",
    "gumbel_softmax",
    "gumbel_top_k",
    "masked_total_loss",
    "parse_calib",
    "parse_label_line",
    "relative_distance_divide",
    "sample_gumbel",
    "select_infer",
    "select_train",
    "serialize_label",
    "warmup_gate",
]
