"""Interpolated convolutions and small networks for irregular 3D point clouds."""

from .geometry import PointSet, SpatialIndex, build_index, farthest_point_sample, normalize_cloud
from .interpconv import InterpConvParams, NeighborPlan, dense_grid_conv_oracle, interpconv, plan
from .kernel import (
    BY_COUNT,
    BY_WEIGHT_SUM,
    GAUSSIAN,
    TRILINEAR,
    KernelLayout,
    aggregate_normalized,
    build_layout,
    gaussian_weight,
    trilinear_weight,
)
from .tensor import Tensor, backward, matmul, no_grad, reduce, relu, reset_tape

__version__ = "0.1.0"

__all__ = [
    "PointSet",
    "SpatialIndex",
    "build_index",
    "farthest_point_sample",
    "normalize_cloud",
    "InterpConvParams",
    "NeighborPlan",
    "dense_grid_conv_oracle",
    "interpconv",
    "plan",
    "KernelLayout",
    "build_layout",
    "aggregate_normalized",
    "gaussian_weight",
    "trilinear_weight",
    "TRILINEAR",
    "GAUSSIAN",
    "BY_COUNT",
    "BY_WEIGHT_SUM",
    "Tensor",
    "backward",
    "matmul",
    "no_grad",
    "reduce",
    "relu",
    "reset_tape",
]
