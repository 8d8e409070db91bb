"""Kernel-weight lattice, interpolation weights, and density normalization.

A kernel is a cubic lattice of weight-vector sites: ``size`` sites per
axis spaced ``spacing`` apart, centered on the kernel origin. Input
points are assigned to nearby sites either by trilinear weights (product
of per-axis tent functions with support one lattice cell) or by a
truncated Gaussian of the Euclidean distance. Per-site aggregation is
normalized by neighbor count or by the weight sum so the result is
invariant to sampling density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _mutation
from .errors import ConfigError, ContractError

TRILINEAR = "trilinear"
GAUSSIAN = "gaussian"
BY_COUNT = "count"
BY_WEIGHT_SUM = "weight_sum"

# Classification recipe fixes the Gaussian support (3 sigma) to 0.1.
DEFAULT_SIGMA = 0.1 / 3.0

_SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class KernelLayout:
    """Site coordinates and hyperparameters of one kernel lattice.

    ``support_radius`` is the Euclidean radius that covers a site's full
    support region: 3*sigma for Gaussian weights and spacing*sqrt(3) for
    trilinear weights, whose support is a cube of half-extent ``spacing``
    per axis (its corners lie beyond a sphere of radius ``spacing``).
    """

    size: int
    spacing: float
    interpolation: str
    normalization: str
    sigma: float | None
    coords: np.ndarray
    support_radius: float

    @property
    def n_sites(self) -> int:
        return self.size ** 3


def build_layout(
    size: int,
    spacing: float,
    interpolation: str = TRILINEAR,
    normalization: str = BY_WEIGHT_SUM,
    sigma: float | None = None,
) -> KernelLayout:
    """Build the cubic site lattice.

    Sites sit at every (i, j, k) * spacing for i, j, k in
    {-(size-1)/2, ..., (size-1)/2}, listed in lexicographic (x, y, z)
    order so the site index is stable across runs.
    """
    if size < 1 or size % 2 == 0:
        raise ConfigError(f"kernel size must be odd and positive, got {size}")
    if spacing <= 0:
        raise ConfigError(f"kernel length must be positive, got {spacing}")
    if interpolation not in (TRILINEAR, GAUSSIAN):
        raise ConfigError(f"unknown interpolation {interpolation!r}")
    if normalization not in (BY_COUNT, BY_WEIGHT_SUM):
        raise ConfigError(f"unknown normalization {normalization!r}")
    if interpolation == GAUSSIAN:
        sigma = DEFAULT_SIGMA if sigma is None else float(sigma)
        if sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {sigma}")
        support = 3.0 * sigma
    else:
        sigma = None
        support = spacing * _SQRT3
    half = (size - 1) // 2
    steps = np.arange(-half, half + 1, dtype=np.float64) * spacing
    coords = np.array(
        [(x, y, z) for x in steps for y in steps for z in steps], dtype=np.float64
    )
    return KernelLayout(
        size=size,
        spacing=float(spacing),
        interpolation=interpolation,
        normalization=normalization,
        sigma=sigma,
        coords=coords,
        support_radius=float(support),
    )


def trilinear_weight(p_delta, p_prime, spacing: float) -> float:
    """Product of per-axis tents: max(0, 1 - |delta - site| / spacing).

    Dividing by the spacing maps the lattice cell to a unit cube, so a
    point strictly inside a cell splits weight 1 across its 8 corners.
    """
    d = np.abs(np.asarray(p_delta, dtype=np.float64) - np.asarray(p_prime, dtype=np.float64))
    return float(np.prod(np.maximum(0.0, 1.0 - d / spacing)))


def gaussian_weight(p_delta, p_prime, sigma: float) -> float:
    """exp(-d^2 / (2 sigma^2)) of the Euclidean distance, zero past 3 sigma."""
    diff = np.asarray(p_delta, dtype=np.float64) - np.asarray(p_prime, dtype=np.float64)
    d2 = float(diff @ diff)
    if d2 > (3.0 * sigma) ** 2 and _mutation.GAUSSIAN_NO_TRUNCATION not in _mutation.ACTIVE:
        return 0.0
    return math.exp(-d2 / (2.0 * sigma * sigma))


def site_weights(offsets: np.ndarray, layout: KernelLayout) -> np.ndarray:
    """Vectorized weights for offsets measured from one site's position."""
    offsets = np.asarray(offsets, dtype=np.float64)
    if layout.interpolation == TRILINEAR:
        return np.prod(np.maximum(0.0, 1.0 - np.abs(offsets) / layout.spacing), axis=-1)
    d2 = np.einsum("...j,...j->...", offsets, offsets)
    w = np.exp(-d2 / (2.0 * layout.sigma * layout.sigma))
    if _mutation.GAUSSIAN_NO_TRUNCATION not in _mutation.ACTIVE:
        w[d2 > (3.0 * layout.sigma) ** 2] = 0.0
    return w


def aggregate_normalized(
    weights: np.ndarray, features: np.ndarray, normalization: str
) -> np.ndarray:
    """Weighted feature sum divided by the neighbor count or weight sum.

    An empty neighborhood (or all-zero weights under weight-sum
    normalization) contributes a zero vector.
    """
    weights = np.asarray(weights, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ContractError(f"features must be (N, c), got {features.shape}")
    if len(weights) != len(features):
        raise ContractError(
            f"{len(weights)} weights vs {len(features)} feature rows"
        )
    if len(weights) == 0:
        return np.zeros(features.shape[1], dtype=np.float64)
    total = weights @ features
    if normalization == BY_COUNT:
        return total / len(weights)
    if normalization == BY_WEIGHT_SUM:
        s = float(weights.sum())
        if s == 0.0:
            return np.zeros(features.shape[1], dtype=np.float64)
        return total / s
    raise ConfigError(f"unknown normalization {normalization!r}")
