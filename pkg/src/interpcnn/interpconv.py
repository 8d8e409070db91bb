"""The interpolated-convolution operator.

For each output location a kernel lattice is centered there; every input
point within a site's support contributes its feature with the site's
interpolation weight; per-site aggregates are density-normalized and
dotted with the learned per-site weight vectors.

Forward and backward share one precomputed neighbor plan, since the
neighbor search dominates cost. All accumulations run in ascending
point-index order inside each site, so results are deterministic and
permutation of the input rows only reorders identical summands.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _mutation
from .errors import ContractError, InputError, ShapeError
from .geometry import PointSet, SpatialIndex
from .kernel import BY_COUNT, TRILINEAR, KernelLayout, site_weights
from .tensor import Tensor, record_op

# One neighbor query per output point covers the whole kernel: any input
# point with a positive weight at some site lies within the farthest site
# plus that site's support. The small pad keeps boundary points whose
# weight formula rounds to a positive value inside the candidate set; the
# weight formula itself, not the query, decides membership.
QUERY_PAD = 1.0 + 1e-9


def query_radius(layout: KernelLayout) -> float:
    """Neighbor-search radius (and minimum index cell size) for a layout."""
    corner = float(np.max(np.linalg.norm(layout.coords, axis=1)))
    return (corner + layout.support_radius) * QUERY_PAD


@dataclass
class InterpConvParams:
    """Learnable state of one operator: kernel layout plus weight tensors.

    ``weights`` has shape (c_out, n_sites, c_in): c_out kernels, each a
    stack of per-site weight vectors over c_in channels.
    """

    layout: KernelLayout
    weights: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        w = self.weights.values
        if w.ndim != 3:
            raise ShapeError(f"weights must be (c_out, sites, c_in), got {w.shape}")
        if w.shape[1] != self.layout.n_sites:
            raise ShapeError(
                f"weights carry {w.shape[1]} sites but the layout has {self.layout.n_sites}"
            )
        if not np.isfinite(w).all():
            raise InputError("weights contain non-finite values")
        if self.bias is not None and self.bias.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match c_out {w.shape[0]}")

    @property
    def c_in(self) -> int:
        return self.weights.shape[2]

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]


@dataclass
class NeighborPlan:
    """Cached neighbor lists for one (inputs, outputs, layout) triple.

    Flat pair entries sorted by (site slot, point index), where slot
    = output_row * n_sites + site_index. ``denom`` holds the per-slot
    normalization (neighbor count or weight sum; 0 for empty slots).
    """

    n_outputs: int
    n_sites: int
    n_points: int
    slot: np.ndarray      # (P,) intp
    point: np.ndarray     # (P,) intp
    weight: np.ndarray    # (P,) raw interpolation weights, all > 0
    denom: np.ndarray     # (n_outputs * n_sites,)
    by_point: np.ndarray  # (P,) permutation sorting entries by (point, slot)

    @property
    def norm_weight(self) -> np.ndarray:
        return self.weight / self.denom[self.slot]


def plan(
    inputs: PointSet,
    output_coords: np.ndarray,
    params: InterpConvParams,
    index: SpatialIndex,
) -> NeighborPlan:
    """Find, for every output point and kernel site, the supporting inputs.

    The index must cover the input cloud with a cell at least as large as
    the layout's kernel reach (``query_radius``).
    """
    layout = params.layout
    if index.n_points != len(inputs):
        raise ContractError(
            f"index covers {index.n_points} points but the cloud has {len(inputs)}"
        )
    radius = query_radius(layout)
    if index.cell_size < radius * (1 - 1e-12):
        raise ContractError(
            f"index cell {index.cell_size} is smaller than the kernel reach "
            f"{radius}"
        )
    output_coords = np.asarray(output_coords, dtype=np.float64)
    m = len(output_coords)
    s = layout.n_sites
    out_id, point_id, _ = index.radius_query_many(
        output_coords, min(radius, index.cell_size), sort=False)
    deltas = inputs.coords[point_id] - output_coords[out_id]
    # Per-axis reachability kills pairs with no site in range before the
    # full weight matrix; the lattice axis values are shared by all axes.
    # Padded like the query so rounding at the boundary never drops a
    # pair the weight formula would accept.
    steps = layout.coords[:layout.size, 2]
    reach = layout.spacing if layout.interpolation == TRILINEAR else layout.support_radius
    near = np.abs(deltas[:, :, None] - steps[None, None, :]) <= reach * QUERY_PAD
    alive = near.any(axis=2).all(axis=1)
    out_id, point_id, deltas = out_id[alive], point_id[alive], deltas[alive]
    # Weights use the operator's own association, offset-from-center minus
    # site coordinate, so they match a straight-line evaluation bit for
    # bit; the candidate filters above never decide membership.
    w_sites = site_weights(deltas[:, None, :] - layout.coords[None, :, :], layout)
    pair, site = np.nonzero(w_sites > 0.0)
    slot = out_id[pair] * s + site
    point = point_id[pair]
    w = w_sites[pair, site]
    order = np.lexsort((point, slot))
    slot, point, w = slot[order], point[order], w[order]
    counts = np.bincount(slot, minlength=m * s).astype(np.float64)
    if layout.normalization == BY_COUNT:
        denom = counts
    else:
        denom = np.bincount(slot, weights=w, minlength=m * s)
    if _mutation.DENOMINATOR_OFF_BY_ONE in _mutation.ACTIVE:
        denom = np.where(counts > 0, denom + 1.0, denom)
    return NeighborPlan(
        n_outputs=m,
        n_sites=s,
        n_points=len(inputs),
        slot=slot,
        point=point,
        weight=w,
        denom=denom,
        by_point=np.lexsort((slot, point)),
    )


def merge_plans(plans: list[NeighborPlan]) -> NeighborPlan:
    """Stack per-cloud plans into one plan over the concatenated rows.

    Cloud b's output slots shift by (outputs so far) * n_sites and its
    point indices by the points so far, so a batch runs as one fused
    scatter/gather. All plans must share one kernel layout.
    """
    if not plans:
        raise ContractError("cannot merge zero plans")
    sites = {p.n_sites for p in plans}
    if len(sites) != 1:
        raise ContractError(f"plans disagree on site count: {sorted(sites)}")
    s = plans[0].n_sites
    slot_parts, point_parts, weight_parts, denom_parts = [], [], [], []
    out_base = 0
    point_base = 0
    for p in plans:
        slot_parts.append(p.slot + out_base * s)
        point_parts.append(p.point + point_base)
        weight_parts.append(p.weight)
        denom_parts.append(p.denom)
        out_base += p.n_outputs
        point_base += p.n_points
    slot = np.concatenate(slot_parts)
    point = np.concatenate(point_parts)
    return NeighborPlan(
        n_outputs=out_base,
        n_sites=s,
        n_points=point_base,
        slot=slot,
        point=point,
        weight=np.concatenate(weight_parts),
        denom=np.concatenate(denom_parts),
        by_point=np.lexsort((slot, point)),
    )


def _segment_rows(values: np.ndarray, keys: np.ndarray, n_segments: int) -> np.ndarray:
    """Sum rows of ``values`` grouped by sorted ``keys`` into n_segments rows."""
    out = np.zeros((n_segments, values.shape[1]), dtype=values.dtype)
    if len(keys) == 0:
        return out
    uniq, starts = np.unique(keys, return_index=True)
    out[uniq] = np.add.reduceat(values, starts, axis=0)
    return out


def _check_plan(plan_: NeighborPlan, features: np.ndarray, params: InterpConvParams,
                n_outputs: int | None = None) -> None:
    if plan_ is None:
        raise ContractError("no saved neighbor plan; run plan()/forward() first")
    if plan_.n_sites != params.layout.n_sites:
        raise ContractError("plan was built for a different kernel layout")
    if plan_.n_points != len(features):
        raise ContractError(
            f"plan covers {plan_.n_points} points but features have {len(features)} rows"
        )
    if n_outputs is not None and plan_.n_outputs != n_outputs:
        raise ContractError(
            f"plan covers {plan_.n_outputs} outputs, expected {n_outputs}"
        )


def _aggregate(features: np.ndarray, plan_: NeighborPlan) -> np.ndarray:
    """Normalized per-slot feature aggregates, shape (n_outputs * n_sites, c)."""
    contrib = features[plan_.point] * plan_.norm_weight[:, None]
    return _segment_rows(contrib, plan_.slot, plan_.n_outputs * plan_.n_sites)


def _forward_values(
    features: np.ndarray, plan_: NeighborPlan, weights: np.ndarray, bias: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray]:
    c_out, s, c_in = weights.shape
    agg = _aggregate(features, plan_)
    out = agg.reshape(plan_.n_outputs, s * c_in) @ weights.reshape(c_out, s * c_in).T
    if bias is not None:
        out = out + bias
    return out, agg


def _backward_values(
    grad_out: np.ndarray,
    features: np.ndarray,
    plan_: NeighborPlan,
    weights: np.ndarray,
    agg: np.ndarray,
    with_bias: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    c_out, s, c_in = weights.shape
    m = plan_.n_outputs
    agg3 = agg.reshape(m, s, c_in)
    grad_w = np.einsum("mk,msc->ksc", grad_out, agg3)
    grad_bias = grad_out.sum(axis=0) if with_bias else None
    # d(out)/d(agg) then scatter through the interpolation weights.
    grad_agg = np.einsum("mk,ksc->msc", grad_out, weights).reshape(m * s, c_in)
    order = plan_.by_point
    contrib = grad_agg[plan_.slot[order]] * plan_.norm_weight[order][:, None]
    grad_f = _segment_rows(contrib, plan_.point[order], len(features))
    return grad_f, grad_w, grad_bias


def forward(
    inputs: PointSet,
    output_coords: np.ndarray,
    params: InterpConvParams,
    plan_: NeighborPlan,
) -> Tensor:
    """Evaluate the operator; returns an (M, c_out) tensor (not taped)."""
    if inputs.features is None:
        raise InputError("input cloud has no features")
    features = inputs.features.values
    _check_plan(plan_, features, params, len(np.atleast_2d(output_coords)))
    bias = params.bias.values if params.bias is not None else None
    out, _ = _forward_values(features, plan_, params.weights.values, bias)
    return Tensor(out)


def backward(grad_out, saved: dict) -> dict:
    """Gradients of a scalar loss through one forward call.

    ``saved`` must hold the forward's ``inputs``, ``plan`` and ``params``.
    Interpolation weights and normalization denominators are constants of
    the coordinates; no coordinate gradients exist.
    """
    plan_ = saved.get("plan")
    if plan_ is None:
        raise ContractError("saved context is missing the neighbor plan")
    inputs: PointSet = saved["inputs"]
    params: InterpConvParams = saved["params"]
    features = inputs.features.values
    _check_plan(plan_, features, params)
    g = grad_out.values if isinstance(grad_out, Tensor) else np.asarray(grad_out, dtype=np.float64)
    _, agg = _forward_values(features, plan_, params.weights.values, None)
    grad_f, grad_w, grad_b = _backward_values(
        g, features, plan_, params.weights.values, agg, params.bias is not None
    )
    out = {"grad_features": Tensor(grad_f), "grad_weights": Tensor(grad_w)}
    if grad_b is not None:
        out["grad_bias"] = Tensor(grad_b)
    return out


def interpconv(features: Tensor, plan_: NeighborPlan, params: InterpConvParams) -> Tensor:
    """Autodiff entry point: tapes the fused backward rule."""
    _check_plan(plan_, features.values, params)
    weights, bias = params.weights, params.bias
    bias_values = bias.values if bias is not None else None
    out_values, agg = _forward_values(features.values, plan_, weights.values, bias_values)
    out = Tensor(out_values)
    f_vals, w_vals = features.values, weights.values

    def rule(g):
        grad_f, grad_w, grad_b = _backward_values(
            g, f_vals, plan_, w_vals, agg, bias is not None
        )
        return [grad_f, grad_w, grad_b] if bias is not None else [grad_f, grad_w]

    inputs = (features, weights, bias) if bias is not None else (features, weights)
    return record_op(out, inputs, rule)


def dense_grid_conv_oracle(grid: np.ndarray, weights) -> np.ndarray:
    """Standard dense 3D convolution used as the grid-equivalence oracle.

    out[v, k] = sum over lattice offsets o of grid[v + o] . W[k, o],
    with zero padding outside the volume. Site order matches the kernel
    layout's lexicographic (x, y, z) ordering.
    """
    grid = np.asarray(grid, dtype=np.float64)
    w = weights.values if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)
    if grid.ndim != 4 or w.ndim != 3 or w.shape[2] != grid.shape[3]:
        raise ShapeError(f"grid {grid.shape} and weights {w.shape} are incompatible")
    c_out, n_sites, _ = w.shape
    n = round(n_sites ** (1.0 / 3.0))
    if n ** 3 != n_sites:
        raise ShapeError(f"{n_sites} sites is not a cubic kernel")
    if n > min(grid.shape[:3]):
        raise ShapeError(f"kernel size {n} exceeds grid extent {grid.shape[:3]}")
    half = (n - 1) // 2
    dims = grid.shape[:3]
    out = np.zeros(dims + (c_out,), dtype=np.float64)
    site = 0
    for dx in range(-half, half + 1):
        for dy in range(-half, half + 1):
            for dz in range(-half, half + 1):
                shifted = np.zeros_like(grid)
                dst = tuple(slice(max(0, -d), dims[a] - max(0, d)) for a, d in enumerate((dx, dy, dz)))
                src = tuple(slice(max(0, d), dims[a] + min(0, d)) for a, d in enumerate((dx, dy, dz)))
                shifted[dst] = grid[src]
                out += np.einsum("xyzc,kc->xyzk", shifted, w[:, site, :])
                site += 1
    return out
