"""Stacked-hourglass keypoint transfer experiments (C++ core)."""

from ._kpt import (
    Dataset,
    HourglassNet,
    builtin_split,
    conv2d,
    generate_synthetic,
    joint_names,
    load_dataset,
    load_checkpoint,
    maxpool2,
    pck,
    run_cli,
    upsample_nearest2,
)

__all__ = [
    "Dataset",
    "HourglassNet",
    "builtin_split",
    "conv2d",
    "generate_synthetic",
    "joint_names",
    "load_dataset",
    "load_checkpoint",
    "maxpool2",
    "pck",
    "run_cli",
    "upsample_nearest2",
]
