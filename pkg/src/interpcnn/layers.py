"""Runtime network layers over batches of point clouds.

Clouds in a batch are processed independently through spatial operators
(no cross-cloud neighborhoods); their feature rows are stacked into one
tensor so each layer is a single taped operation. BatchNorm pools its
statistics over all points of all clouds in the batch.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .geometry import PointSet, build_index, canonical_order, farthest_point_sample
from .interpconv import InterpConvParams, interpconv, merge_plans, plan, query_radius
from .kernel import TRILINEAR, build_layout
from .tensor import Tensor, add, concat_cols, concat_rows, matmul, mul, record_op, relu

# Plans depend only on coordinates and kernel geometry, never on weights,
# so layers with identical geometry over the same arrays (the stem and
# the blocks' size-1 operator layers) can share one plan per forward
# pass. The cache pins the keyed arrays so their ids stay valid for its
# lifetime; the executor opens one scope per forward.
_PLAN_CACHE: dict | None = None


@contextmanager
def shared_plan_scope():
    global _PLAN_CACHE
    previous = _PLAN_CACHE
    _PLAN_CACHE = {}
    try:
        yield
    finally:
        _PLAN_CACHE = previous


@dataclass
class Batch:
    """Per-cloud coordinates plus the stacked feature tensor."""

    coords: list[np.ndarray]
    features: Tensor
    offsets: np.ndarray  # (B+1,) row offsets into features

    @classmethod
    def from_clouds(cls, clouds: list[PointSet], feature_mode: str = "ones") -> "Batch":
        coords = [c.coords for c in clouds]
        rows = []
        for cloud in clouds:
            if cloud.features is not None:
                rows.append(cloud.features.values)
            elif feature_mode == "ones":
                rows.append(np.ones((len(cloud), 1)))
            elif feature_mode == "xyz":
                rows.append(cloud.coords.copy())
            elif feature_mode == "ones_xyz":
                rows.append(np.hstack([np.ones((len(cloud), 1)), cloud.coords]))
            else:
                raise ConfigError(f"unknown feature mode {feature_mode!r}")
        counts = [len(c) for c in coords]
        offsets = np.concatenate([[0], np.cumsum(counts)])
        return cls(coords, Tensor(np.concatenate(rows, axis=0)), offsets)

    @property
    def n_clouds(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def rows_of(self, b: int) -> slice:
        return slice(int(self.offsets[b]), int(self.offsets[b + 1]))


def feature_channels(mode: str) -> int:
    return {"ones": 1, "xyz": 3, "ones_xyz": 4}[mode]


# ---------------------------------------------------------------------------
# Taped layer math
# ---------------------------------------------------------------------------


def batchnorm_train_values(x: np.ndarray, scale: np.ndarray, shift: np.ndarray,
                           eps: float = 1e-5):
    """Normalize over the row axis; returns (y, x_hat, inv_std, (mean, var))."""
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    return x_hat * scale + shift, x_hat, inv_std, (mean, var)


def batchnorm(x: Tensor, state: "BatchNormLayer", training: bool) -> Tensor:
    """Per-channel normalization with learnable scale/shift.

    Training mode normalizes by the current batch statistics and updates
    the running estimates; eval mode applies the frozen running stats.
    """
    if x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm built for {state.channels} channels, got {x.shape[1]}")
    if not training:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        gain = Tensor(state.scale.values * inv)
        offset = Tensor(state.shift.values - state.running_mean * inv * state.scale.values)
        return add(mul(x, gain), offset)
    y, x_hat, inv_std, (mean, var) = batchnorm_train_values(
        x.values, state.scale.values, state.shift.values, state.eps)
    m = state.momentum
    state.running_mean = m * state.running_mean + (1 - m) * mean
    state.running_var = m * state.running_var + (1 - m) * var
    out = Tensor(y)
    scale_vals = state.scale.values
    n = x.shape[0]

    def rule(g):
        gs = g * scale_vals
        dx = (inv_std / n) * (n * gs - gs.sum(axis=0) - x_hat * (gs * x_hat).sum(axis=0))
        return [dx, (g * x_hat).sum(axis=0), g.sum(axis=0)]

    return record_op(out, (x, state.scale, state.shift), rule)


def segment_max_pool(x: Tensor, offsets: np.ndarray) -> Tensor:
    """Per-cloud channelwise max; gradient routes to the first argmax row."""
    vals = x.values
    n_seg = len(offsets) - 1
    c = vals.shape[1]
    out = np.empty((n_seg, c))
    arg_rows = np.empty((n_seg, c), dtype=np.intp)
    cols = np.arange(c)
    for b in range(n_seg):
        lo, hi = int(offsets[b]), int(offsets[b + 1])
        if lo == hi:
            raise ContractError(f"cloud {b} has no points to pool")
        seg = vals[lo:hi]
        idx = np.argmax(seg, axis=0)  # first row on ties
        out[b] = seg[idx, cols]
        arg_rows[b] = lo + idx

    def rule(g):
        grad = np.zeros_like(vals)
        grad[arg_rows, cols[None, :]] = g  # (row, col) pairs are unique across segments
        return [grad]

    return record_op(Tensor(out), (x,), rule)


def weighted_gather(src: Tensor, index: np.ndarray, weights: np.ndarray) -> Tensor:
    """out[j] = sum_k weights[j, k] * src[index[j, k]]; scatter-add backward."""
    idx = np.asarray(index, dtype=np.intp)
    w = np.asarray(weights, dtype=np.float64)
    out = Tensor(np.einsum("jk,jkc->jc", w, src.values[idx]))

    def rule(g):
        grad = np.zeros_like(src.values)
        np.add.at(grad, idx.reshape(-1),
                  (g[:, None, :] * w[:, :, None]).reshape(-1, src.values.shape[1]))
        return [grad]

    return record_op(out, (src,), rule)


def inverse_distance_weights(coarse_coords: np.ndarray, fine_coords: np.ndarray,
                             k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Indices and normalized 1/d^2 weights of each fine point's k nearest
    coarse points. A fine point coinciding with a coarse point copies it."""
    if len(coarse_coords) == 0:
        raise ContractError("feature propagation needs a nonempty coarse stage")
    k = min(k, len(coarse_coords))
    diff = fine_coords[:, None, :] - coarse_coords[None, :, :]
    d2 = np.einsum("jkc,jkc->jk", diff, diff)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    d2_k = np.take_along_axis(d2, order, axis=1)
    exact = d2_k[:, 0] == 0.0
    with np.errstate(divide="ignore"):
        w = 1.0 / d2_k
    w[exact] = 0.0
    w[exact, 0] = 1.0
    w = w / w.sum(axis=1, keepdims=True)
    return order, w


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class InterpConvLayer:
    """One interpolated convolution over a batch, optionally downsampling.

    size == 1 with ``pointwise`` runs as a per-point linear map: with
    coincident input and output coordinates each output point aggregates
    exactly its own feature, so the lattice degenerates to a
    channel-mixing matrix. Without ``pointwise`` the single site runs
    through the full operator and aggregates its interpolation support.
    Downsampling picks a farthest-point subset of each cloud in canonical
    (coordinate-sorted) order, which keeps the choice independent of the
    input row order.
    """

    def __init__(self, name: str, c_in: int, c_out: int, size: int, length: float,
                 interpolation: str, normalization: str, sigma: float | None,
                 rng: np.random.Generator, bias: bool = True, ratio: float = 1.0,
                 fps_seed: int = 0, downsampler: str = "fps", pointwise: bool = True):
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        self.size = size
        self.ratio = float(ratio)
        self.fps_seed = fps_seed
        self.downsampler = downsampler
        self.pointwise = pointwise and size == 1
        if self.pointwise:
            if ratio != 1.0:
                raise ConfigError("pointwise layers do not downsample")
            bound = 1.0 / np.sqrt(c_in)
            self.weight = Tensor(rng.uniform(-bound, bound, (c_in, c_out)), requires_grad=True)
            self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
            self.params = None
        else:
            layout = build_layout(size, length, interpolation, normalization, sigma=sigma)
            fan_in = layout.n_sites * c_in
            bound = 1.0 / np.sqrt(fan_in)
            weights = Tensor(rng.uniform(-bound, bound, (c_out, layout.n_sites, c_in)),
                             requires_grad=True)
            b = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
            self.params = InterpConvParams(layout, weights, b)
            self.weight = weights
            self.bias = b

    def parameters(self):
        out = [(f"{self.name}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{self.name}.bias", self.bias))
        return out

    def output_coords(self, coords: np.ndarray) -> np.ndarray:
        if self.ratio >= 1.0:
            return coords
        m = max(1, int(round(len(coords) * self.ratio)))
        order = canonical_order(coords)
        if self.downsampler == "random":
            rng = np.random.default_rng(self.fps_seed)
            picked = np.sort(rng.choice(len(coords), size=m, replace=False))
        else:
            picked = farthest_point_sample(coords[order], m, seed=self.fps_seed)
        return coords[order][picked]

    def forward(self, batch: Batch, training: bool) -> Batch:
        if batch.channels != self.c_in:
            raise ShapeError(f"{self.name}: expected {self.c_in} channels, got {batch.channels}")
        if self.pointwise:
            out = matmul(batch.features, self.weight)
            if self.bias is not None:
                out = add(out, self.bias)
            return Batch(batch.coords, out, batch.offsets)
        layout = self.params.layout
        # spacing shapes a single-site gaussian kernel only through sigma
        geometry = (layout.size, layout.interpolation, layout.normalization,
                    layout.sigma,
                    layout.spacing if layout.size > 1 or layout.interpolation == TRILINEAR
                    else 0.0)
        plans, new_coords = [], []
        for b, coords in enumerate(batch.coords):
            out_coords = self.output_coords(coords)
            key = (id(coords), id(out_coords), geometry)
            cached = _PLAN_CACHE.get(key) if _PLAN_CACHE is not None else None
            if cached is None:
                cloud = PointSet(coords)
                index = build_index(cloud, query_radius(layout))
                plan_b = plan(cloud, out_coords, self.params, index)
                if _PLAN_CACHE is not None:
                    _PLAN_CACHE[key] = (coords, out_coords, plan_b)
            else:
                plan_b = cached[2]
            plans.append(plan_b)
            new_coords.append(out_coords)
        merged = merge_plans(plans)
        out = interpconv(batch.features, merged, self.params)
        counts = [len(c) for c in new_coords]
        return Batch(new_coords, out, np.concatenate([[0], np.cumsum(counts)]))


class BatchNormLayer:
    def __init__(self, name: str, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.name = name
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def parameters(self):
        return [(f"{self.name}.scale", self.scale), (f"{self.name}.shift", self.shift)]

    def state_tensors(self):
        """Non-learnable buffers persisted in checkpoints."""
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]

    def load_state_tensor(self, suffix: str, values: np.ndarray) -> None:
        if suffix == "running_mean":
            self.running_mean = values.copy()
        elif suffix == "running_var":
            self.running_var = values.copy()
        else:
            raise ContractError(f"unknown batchnorm buffer {suffix!r}")

    def forward(self, batch: Batch, training: bool) -> Batch:
        return Batch(batch.coords, batchnorm(batch.features, self, training), batch.offsets)


class ReLULayer:
    def __init__(self, name: str):
        self.name = name

    def parameters(self):
        return []

    def forward(self, batch: Batch, training: bool) -> Batch:
        return Batch(batch.coords, relu(batch.features), batch.offsets)


class DropoutLayer:
    def __init__(self, name: str, rate: float, seed: int):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.name = name
        self.rate = rate
        self._rng = np.random.default_rng(seed)

    def parameters(self):
        return []

    def apply(self, x: Tensor, training: bool) -> Tensor:
        if not training or self.rate == 0.0:
            return x
        keep = (self._rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return mul(x, Tensor(keep))


class LinearLayer:
    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator):
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        bound = 1.0 / np.sqrt(c_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (c_in, c_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def parameters(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def apply(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)


class FeaturePropagationLayer:
    """Decoder upsampling: 3-NN inverse-square-distance interpolation of the
    coarse features, concatenated with the skip features, then a per-point
    linear + BatchNorm + ReLU."""

    def __init__(self, name: str, c_coarse: int, c_skip: int, c_out: int,
                 rng: np.random.Generator):
        self.name = name
        self.c_coarse, self.c_skip, self.c_out = c_coarse, c_skip, c_out
        self.linear = LinearLayer(f"{name}.mix", c_coarse + c_skip, c_out, rng)
        self.norm = BatchNormLayer(f"{name}.norm", c_out)

    def parameters(self):
        return self.linear.parameters() + self.norm.parameters()

    def forward(self, coarse: Batch, fine: Batch, training: bool) -> Batch:
        if coarse.n_clouds != fine.n_clouds:
            raise ContractError("coarse and fine batches carry different cloud counts")
        upsampled = []
        for b in range(coarse.n_clouds):
            idx, w = inverse_distance_weights(coarse.coords[b], fine.coords[b])
            upsampled.append(weighted_gather(coarse.features, idx + int(coarse.offsets[b]), w))
        interpolated = upsampled[0] if len(upsampled) == 1 else concat_rows(upsampled)
        mixed = self.linear.apply(concat_cols([interpolated, fine.features]))
        out = Batch(fine.coords, mixed, fine.offsets)
        out = self.norm.forward(out, training)
        return Batch(out.coords, relu(out.features), out.offsets)
