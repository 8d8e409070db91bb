"""Declarative network specs and their runtime executor.

Two architectures are provided. The classifier stacks a pointwise stem,
two multi-branch multi-receptive-field inception modules (each branch a
bottleneck block with its own kernel length), farthest-point halving
after each module, a global max pool, and a small dense head. The
segmenter is an encoder of spatial convolutions with halving and
doubling kernel length, mirrored by feature-propagation upsampling with
skip concatenation, and a pointwise head emitting per-point logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .geometry import PointSet, canonical_order, farthest_point_sample
from .kernel import BY_COUNT, GAUSSIAN, TRILINEAR
from .layers import (
    Batch,
    BatchNormLayer,
    DropoutLayer,
    FeaturePropagationLayer,
    InterpConvLayer,
    LinearLayer,
    ReLULayer,
    feature_channels,
    segment_max_pool,
    shared_plan_scope,
)
from .tensor import Tensor, concat_cols, gather_rows, relu

CLASSIFICATION = "classification"
SEGMENTATION = "segmentation"


@dataclass(frozen=True)
class LayerSpec:
    """One declarative layer; fields beyond ``kind`` are kind-specific."""

    kind: str
    c_in: int = 0
    c_out: int = 0
    size: int = 1
    length: float = 0.0
    interpolation: str = TRILINEAR
    normalization: str = BY_COUNT
    sigma: float | None = None
    bias: bool = True
    ratio: float = 1.0
    rate: float = 0.0
    method: str = "fps"
    pointwise: bool = True  # size-1 convs: per-point linear vs true operator
    skip_source: int | None = None
    c_skip: int = 0
    branches: tuple[tuple["LayerSpec", ...], ...] = ()

    def parameter_count(self) -> int:
        if self.kind == "interpconv":
            n = self.c_out * self.size**3 * self.c_in
            return n + (self.c_out if self.bias else 0)
        if self.kind == "batchnorm":
            return 2 * self.c_out
        if self.kind == "linear":
            return self.c_in * self.c_out + self.c_out
        if self.kind == "inception":
            return sum(s.parameter_count() for branch in self.branches for s in branch)
        if self.kind == "feature_propagation":
            mix = (self.c_in + self.c_skip) * self.c_out + self.c_out
            return mix + 2 * self.c_out
        return 0


@dataclass
class NetworkSpec:
    """Ordered layer list plus skip edges and expected point schedule."""

    task: str
    feature_mode: str
    input_channels: int
    n_outputs: int
    layers: list[LayerSpec]
    point_schedule: list[int] = field(default_factory=list)
    skip_edges: list[tuple[int, int]] = field(default_factory=list)

    def parameter_count(self) -> int:
        return sum(s.parameter_count() for s in self.layers)


def _conv(c_in, c_out, size, length, interpolation, normalization, sigma, bias,
          ratio=1.0, method="fps", pointwise=True) -> LayerSpec:
    return LayerSpec(
        kind="interpconv", c_in=c_in, c_out=c_out, size=size, length=length,
        interpolation=interpolation, normalization=normalization, sigma=sigma,
        bias=bias, ratio=ratio, method=method, pointwise=pointwise,
    )


def _bn(c) -> LayerSpec:
    return LayerSpec(kind="batchnorm", c_out=c)


_RELU = LayerSpec(kind="relu")


def interpconv_block(
    c_in: int, c_mid: int, c_out: int, length: float,
    middle_size: int = 3, interpolation: str = GAUSSIAN,
    normalization: str = BY_COUNT, sigma: float | None = None, bias: bool = True,
    pointwise: bool = True,
) -> list[LayerSpec]:
    """Bottleneck block: pointwise reduce, spatial middle, pointwise expand,
    each followed by BatchNorm and ReLU."""
    if min(c_in, c_mid, c_out) < 1:
        raise ConfigError("block channels must be positive")
    if c_mid > min(c_in, c_out):
        raise ConfigError(
            f"bottleneck width {c_mid} must not exceed c_in={c_in} or c_out={c_out}")
    opts = dict(interpolation=interpolation, normalization=normalization,
                sigma=sigma, bias=bias, pointwise=pointwise)
    return [
        _conv(c_in, c_mid, 1, length, **opts), _bn(c_mid), _RELU,
        _conv(c_mid, c_mid, middle_size, length, **opts), _bn(c_mid), _RELU,
        _conv(c_mid, c_out, 1, length, **opts), _bn(c_out), _RELU,
    ]


def point_inception(
    c_in: int, branches: list[tuple[int, int, float]],
    middle_size: int = 3, interpolation: str = GAUSSIAN,
    normalization: str = BY_COUNT, sigma: float | None = None, bias: bool = True,
    pointwise: bool = True,
) -> LayerSpec:
    """Parallel bottleneck blocks over the same points, channel-concatenated.

    Each branch is (c_mid, c_out, kernel_length); branches share the input
    point set so the concat is well defined.
    """
    if len(branches) < 2:
        raise ConfigError(f"an inception module needs at least 2 branches, got {len(branches)}")
    built = tuple(
        tuple(interpconv_block(c_in, c_mid, c_out, length, middle_size,
                               interpolation, normalization, sigma, bias, pointwise))
        for c_mid, c_out, length in branches
    )
    c_total = sum(c_out for _, c_out, _ in branches)
    return LayerSpec(kind="inception", c_in=c_in, c_out=c_total, branches=built)


@dataclass
class ClassifierConfig:
    n_points: int = 1024
    n_classes: int = 40
    feature_mode: str = "xyz"
    stem_channels: int = 64
    branch_channels: tuple[int, int] = (128, 256)  # per-branch width per module
    module1_lengths: tuple[float, ...] = (0.1, 0.2, 0.4)
    module2_lengths: tuple[float, ...] = (0.2, 0.4, 0.8)
    middle_size: int = 3
    interpolation: str = GAUSSIAN
    normalization: str = BY_COUNT
    sigma: float | None = None
    head_channels: tuple[int, int] = (512, 256)
    dropout: float = 0.5
    downsample_ratio: float = 0.5
    downsampler: str = "fps"
    bias: bool = True
    pointwise_mode: str = "linear"  # size-1 convs: "linear" or "operator"


def build_classifier(config: ClassifierConfig) -> NetworkSpec:
    cfg = config
    if cfg.n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {cfg.n_classes}")
    if cfg.middle_size % 2 == 0:
        raise ConfigError(f"middle kernel size must be odd, got {cfg.middle_size}")
    if cfg.pointwise_mode not in ("linear", "operator"):
        raise ConfigError(f"unknown pointwise mode {cfg.pointwise_mode!r}")
    pointwise = cfg.pointwise_mode == "linear"
    c0 = feature_channels(cfg.feature_mode)
    opts = dict(middle_size=cfg.middle_size, interpolation=cfg.interpolation,
                normalization=cfg.normalization, sigma=cfg.sigma, bias=cfg.bias,
                pointwise=pointwise)
    layers: list[LayerSpec] = [
        _conv(c0, cfg.stem_channels, 1, min(cfg.module1_lengths),
              cfg.interpolation, cfg.normalization, cfg.sigma, cfg.bias,
              pointwise=pointwise),
        _bn(cfg.stem_channels), _RELU,
    ]
    width = cfg.stem_channels
    schedule = [cfg.n_points]
    for lengths, c_out in zip((cfg.module1_lengths, cfg.module2_lengths), cfg.branch_channels):
        c_mid = max(1, c_out // 4)
        branches = [(c_mid, c_out, length) for length in lengths]
        layers.append(point_inception(width, branches, **opts))
        layers.append(LayerSpec(kind="downsample", ratio=cfg.downsample_ratio,
                                method=cfg.downsampler))
        width = c_out * len(lengths)
        schedule.append(max(1, int(round(schedule[-1] * cfg.downsample_ratio))))
    layers.append(LayerSpec(kind="global_max_pool", c_in=width, c_out=width))
    h1, h2 = cfg.head_channels
    layers += [
        LayerSpec(kind="linear", c_in=width, c_out=h1), _RELU,
        LayerSpec(kind="dropout", rate=cfg.dropout),
        LayerSpec(kind="linear", c_in=h1, c_out=h2), _RELU,
        LayerSpec(kind="dropout", rate=cfg.dropout),
        LayerSpec(kind="linear", c_in=h2, c_out=cfg.n_classes),
    ]
    return NetworkSpec(
        task=CLASSIFICATION, feature_mode=cfg.feature_mode, input_channels=c0,
        n_outputs=cfg.n_classes, layers=layers, point_schedule=schedule,
    )


@dataclass
class SegmenterConfig:
    n_points: int = 2048
    n_parts: int = 50
    feature_mode: str = "xyz"
    encoder_channels: tuple[int, ...] = (64, 128, 256)
    decoder_channels: tuple[int, ...] = (128, 64, 64)
    first_length: float = 0.05
    interpolation: str = TRILINEAR
    normalization: str = BY_COUNT
    sigma: float | None = None
    downsample_ratio: float = 0.5
    downsampler: str = "fps"
    bias: bool = True


def build_segmenter(config: SegmenterConfig) -> NetworkSpec:
    cfg = config
    depth = len(cfg.encoder_channels)
    if depth < 1:
        raise ConfigError("encoder needs at least one stage")
    if len(cfg.decoder_channels) != depth:
        raise ConfigError(
            f"decoder needs {depth} stages to mirror the encoder, "
            f"got {len(cfg.decoder_channels)}")
    schedule = [cfg.n_points]
    for _ in range(depth):
        nxt = int(round(schedule[-1] * cfg.downsample_ratio))
        if nxt < 1:
            raise ConfigError(
                f"depth {depth} exhausts the cloud: stage would hold {nxt} points")
        schedule.append(nxt)
    c0 = feature_channels(cfg.feature_mode)
    layers: list[LayerSpec] = [LayerSpec(kind="checkpoint")]
    width = c0
    stage_channels = [c0]
    length = cfg.first_length
    for i, c_out in enumerate(cfg.encoder_channels):
        layers += [
            _conv(width, c_out, 3, length, cfg.interpolation, cfg.normalization,
                  cfg.sigma, cfg.bias, ratio=cfg.downsample_ratio, method=cfg.downsampler),
            _bn(c_out), _RELU,
        ]
        width = c_out
        stage_channels.append(c_out)
        length *= 2.0
        if i < depth - 1:
            layers.append(LayerSpec(kind="checkpoint"))
    skip_edges = []
    for j, c_out in zip(range(depth - 1, -1, -1), cfg.decoder_channels):
        layers.append(LayerSpec(
            kind="feature_propagation", c_in=width, c_out=c_out,
            c_skip=stage_channels[j], skip_source=j,
        ))
        skip_edges.append((len(layers) - 1, j))
        width = c_out
    layers.append(_conv(width, cfg.n_parts, 1, 0.0, cfg.interpolation,
                        cfg.normalization, cfg.sigma, cfg.bias))
    return NetworkSpec(
        task=SEGMENTATION, feature_mode=cfg.feature_mode, input_channels=c0,
        n_outputs=cfg.n_parts, layers=layers, point_schedule=schedule,
        skip_edges=skip_edges,
    )


# ---------------------------------------------------------------------------
# Runtime
# ---------------------------------------------------------------------------


@dataclass
class NetworkOutput:
    logits: Tensor
    offsets: np.ndarray | None = None  # per-cloud row offsets (segmentation)


class _Downsample:
    """Row-selecting farthest-point (or random) subset, canonical order."""

    def __init__(self, name: str, ratio: float, seed: int, method: str):
        self.name = name
        self.ratio = ratio
        self.seed = seed
        self.method = method

    def parameters(self):
        return []

    def forward(self, batch: Batch, training: bool) -> Batch:
        new_coords, rows = [], []
        for b, coords in enumerate(batch.coords):
            m = max(1, int(round(len(coords) * self.ratio)))
            order = canonical_order(coords)
            if self.method == "random":
                rng = np.random.default_rng(self.seed)
                picked = np.sort(rng.choice(len(coords), size=m, replace=False))
            else:
                picked = farthest_point_sample(coords[order], m, seed=self.seed)
            keep = order[picked]
            new_coords.append(coords[keep])
            rows.append(keep + int(batch.offsets[b]))
        feats = gather_rows(batch.features, np.concatenate(rows))
        counts = [len(c) for c in new_coords]
        return Batch(new_coords, feats, np.concatenate([[0], np.cumsum(counts)]))


class _Inception:
    def __init__(self, name: str, branches: list[list]):
        self.name = name
        self.branches = branches

    def parameters(self):
        out = []
        for branch in self.branches:
            for layer in branch:
                out.extend(layer.parameters())
        return out

    def forward(self, batch: Batch, training: bool) -> Batch:
        outputs = []
        for branch in self.branches:
            current = batch
            for layer in branch:
                current = layer.forward(current, training)
            outputs.append(current)
        first = outputs[0]
        for other in outputs[1:]:
            if [len(c) for c in other.coords] != [len(c) for c in first.coords]:
                raise ContractError(f"{self.name}: branch output point counts differ")
        return Batch(first.coords, concat_cols([o.features for o in outputs]), first.offsets)


class Network:
    """Executable network built from a NetworkSpec.

    ``seed`` fixes parameter initialization, per-layer downsampling picks,
    and dropout masks, so two networks built from the same (spec, seed)
    behave identically.
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng(seed)
        self._counter = 0
        self.layers = [self._build(s, rng, f"layer{i}") for i, s in enumerate(spec.layers)]
        self._bn_layers = [l for l in self._walk() if isinstance(l, BatchNormLayer)]

    def _next_seed(self) -> int:
        self._counter += 1
        return self.seed * 100_003 + self._counter

    def _build(self, s: LayerSpec, rng: np.random.Generator, name: str):
        if s.kind == "interpconv":
            return InterpConvLayer(
                name, s.c_in, s.c_out, s.size, s.length, s.interpolation,
                s.normalization, s.sigma, rng, bias=s.bias, ratio=s.ratio,
                fps_seed=self._next_seed(), downsampler=s.method,
                pointwise=s.pointwise)
        if s.kind == "batchnorm":
            return BatchNormLayer(name, s.c_out)
        if s.kind == "relu":
            return ReLULayer(name)
        if s.kind == "dropout":
            return DropoutLayer(name, s.rate, self._next_seed())
        if s.kind == "linear":
            return LinearLayer(name, s.c_in, s.c_out, rng)
        if s.kind == "downsample":
            return _Downsample(name, s.ratio, self._next_seed(), s.method)
        if s.kind == "inception":
            branches = [
                [self._build(sub, rng, f"{name}.b{bi}.l{li}") for li, sub in enumerate(branch)]
                for bi, branch in enumerate(s.branches)
            ]
            return _Inception(name, branches)
        if s.kind == "feature_propagation":
            return FeaturePropagationLayer(name, s.c_in, s.c_skip, s.c_out, rng)
        if s.kind in ("global_max_pool", "checkpoint"):
            return s.kind
        raise ConfigError(f"unknown layer kind {s.kind!r}")

    def _walk(self):
        for layer in self.layers:
            if isinstance(layer, _Inception):
                for branch in layer.branches:
                    yield from branch
            elif isinstance(layer, FeaturePropagationLayer):
                yield layer.linear
                yield layer.norm
            elif not isinstance(layer, str):
                yield layer


    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for layer in self.layers:
            if not isinstance(layer, str):
                out.extend(layer.parameters())
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for bn in self._bn_layers:
            out.extend(bn.state_tensors())
        return out

    def load_buffer(self, name: str, values: np.ndarray) -> None:
        stem, _, suffix = name.rpartition(".")
        for bn in self._bn_layers:
            if bn.name == stem:
                bn.load_state_tensor(suffix, values)
                return
        raise ContractError(f"no batchnorm buffer named {name!r}")

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def forward(self, clouds: list[PointSet], training: bool = False) -> NetworkOutput:
        batch = Batch.from_clouds(clouds, self.spec.feature_mode)
        if batch.channels != self.spec.input_channels:
            raise ShapeError(
                f"network expects {self.spec.input_channels} input channels, "
                f"got {batch.channels}")
        history: list[Batch] = []
        current: Batch | Tensor = batch
        with shared_plan_scope():
            for spec, layer in zip(self.spec.layers, self.layers):
                if layer == "checkpoint":
                    history.append(current)
                elif layer == "global_max_pool":
                    current = segment_max_pool(current.features, current.offsets)
                elif spec.kind == "feature_propagation":
                    current = layer.forward(current, history[spec.skip_source], training)
                elif isinstance(current, Batch):
                    current = layer.forward(current, training)
                elif spec.kind == "linear":
                    current = layer.apply(current)
                elif spec.kind == "dropout":
                    current = layer.apply(current, training)
                elif spec.kind == "relu":
                    current = relu(current)
                else:
                    raise ContractError(
                        f"layer kind {spec.kind!r} cannot run on pooled features")
        if isinstance(current, Batch):
            return NetworkOutput(current.features, current.offsets)
        return NetworkOutput(current, None)


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    return Network(spec, seed)


def _layer_to_dict(s: LayerSpec) -> dict:
    d = {
        "kind": s.kind, "c_in": s.c_in, "c_out": s.c_out, "size": s.size,
        "length": s.length, "interpolation": s.interpolation,
        "normalization": s.normalization, "sigma": s.sigma, "bias": s.bias,
        "ratio": s.ratio, "rate": s.rate, "method": s.method,
        "pointwise": s.pointwise, "skip_source": s.skip_source, "c_skip": s.c_skip,
    }
    if s.branches:
        d["branches"] = [[_layer_to_dict(sub) for sub in branch] for branch in s.branches]
    return d


def _layer_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    branches = tuple(
        tuple(_layer_from_dict(sub) for sub in branch)
        for branch in d.pop("branches", [])
    )
    return LayerSpec(branches=branches, **d)


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "task": spec.task,
        "feature_mode": spec.feature_mode,
        "input_channels": spec.input_channels,
        "n_outputs": spec.n_outputs,
        "point_schedule": list(spec.point_schedule),
        "skip_edges": [list(edge) for edge in spec.skip_edges],
        "layers": [_layer_to_dict(s) for s in spec.layers],
    }


def spec_from_dict(d: dict) -> NetworkSpec:
    return NetworkSpec(
        task=d["task"],
        feature_mode=d["feature_mode"],
        input_channels=d["input_channels"],
        n_outputs=d["n_outputs"],
        layers=[_layer_from_dict(s) for s in d["layers"]],
        point_schedule=list(d.get("point_schedule", [])),
        skip_edges=[tuple(e) for e in d.get("skip_edges", [])],
    )
