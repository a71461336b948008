# SPDX-License-Identifier: Apache-2.0
"""Masked retention decision model: retention kernels, simulator and tools."""

from ._core import (
    DatasetError,
    DimensionError,
    NumericError,
    SimConfig,
    alpha_schedule,
    compute_rtg,
    ctr,
    decay_mask,
    retention,
    rollout,
    rotation_angles,
    run_cli,
    topk_metrics,
)

__all__ = [
    "DatasetError",
    "DimensionError",
    "NumericError",
    "SimConfig",
    "alpha_schedule",
    "compute_rtg",
    "ctr",
    "decay_mask",
    "retention",
    "rollout",
    "rotation_angles",
    "run_cli",
    "topk_metrics",
]
