"""Optimizer, losses, augmentation, and the train/eval loops."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import LabeledCloud
from .errors import InputError, TrainingError
from .geometry import PointSet
from .networks import CLASSIFICATION, SEGMENTATION, Network
from .tensor import Tensor, backward, no_grad, record_op, reset_tape, zero_grads


@dataclass
class OptimState:
    """Adam moments plus the step-decay learning-rate schedule."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.7
    decay_every: int = 80
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def scheduled_lr(self, epoch: int) -> float:
        return self.lr * self.decay ** (epoch // self.decay_every)


def adam_step(params: Sequence[tuple[str, Tensor]], state: OptimState,
              epoch: int = 0) -> None:
    """Bias-corrected Adam update in place; a missing gradient counts as zero."""
    lr = state.scheduled_lr(epoch)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.values)
        elif not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p.values))
        v = state.v.setdefault(name, np.zeros_like(p.values))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax at the true class, max-shifted for stability."""
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.values
    shifted = z - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1)
    nll = np.log(total) - shifted[np.arange(n), labels]
    out = Tensor(nll.mean())
    softmax = exp / total[:, None]

    def rule(g):
        grad = softmax.copy()
        grad[np.arange(n), labels] -= 1.0
        return [grad * (float(g) / n)]

    return record_op(out, (logits,), rule)


@dataclass
class AugmentSpec:
    """Random per-cloud uniform scale plus clipped Gaussian coordinate jitter."""

    scale_range: tuple[float, float] = (0.8, 1.2)
    jitter_std: float = 0.02
    jitter_clip_stds: float = 3.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise InputError(f"bad scale range {self.scale_range}")
        if self.jitter_std < 0:
            raise InputError(f"jitter std must be >= 0, got {self.jitter_std}")


def augment(cloud: PointSet, spec: AugmentSpec,
            rng: np.random.Generator | None = None) -> PointSet:
    """One scale factor per cloud, then independent clipped jitter per coordinate."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    coords = cloud.coords * rng.uniform(*spec.scale_range)
    if spec.jitter_std > 0:
        cap = spec.jitter_clip_stds * spec.jitter_std
        coords = coords + np.clip(
            rng.normal(0.0, spec.jitter_std, coords.shape), -cap, cap)
    return PointSet(coords, cloud.features)


# ---------------------------------------------------------------------------
# Datasets and metrics
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    loss: float
    accuracy: float
    miou_cat: float | None = None
    miou_inst: float | None = None
    per_class_iou: dict[int, float] | None = None


def iou_per_class(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> dict[int, float]:
    """Pooled intersection-over-union; classes absent everywhere are omitted."""
    out = {}
    for k in range(n_classes):
        inter = int(np.sum((pred == k) & (truth == k)))
        union = int(np.sum((pred == k) | (truth == k)))
        if union > 0:
            out[k] = inter / union
    return out


def instance_miou(preds: list[np.ndarray], truths: list[np.ndarray],
                  n_classes: int) -> float:
    """Per-cloud part-averaged IoU, then averaged over clouds.

    Inside one cloud, a class absent from both prediction and truth
    counts as IoU 1 (the usual part-segmentation convention).
    """
    scores = []
    for pred, truth in zip(preds, truths):
        per_class = []
        for k in range(n_classes):
            inter = int(np.sum((pred == k) & (truth == k)))
            union = int(np.sum((pred == k) | (truth == k)))
            per_class.append(1.0 if union == 0 else inter / union)
        scores.append(float(np.mean(per_class)))
    return float(np.mean(scores))


def _batches(items: Sequence, size: int):
    for start in range(0, len(items), size):
        yield items[start:start + size]


def evaluate(network: Network, dataset: Sequence[LabeledCloud],
             task: str | None = None, batch_size: int = 8) -> Metrics:
    """Loss plus accuracy (classification) or accuracy and both mean-IoU
    conventions (segmentation). Pure: repeated calls return identical values."""
    task = task or network.spec.task
    if not dataset:
        raise InputError("cannot evaluate on an empty dataset")
    losses, correct, total = [], 0, 0
    preds_per_cloud, truths_per_cloud = [], []
    with no_grad():
        for chunk in _batches(list(dataset), batch_size):
            out = network.forward([item.cloud for item in chunk], training=False)
            logits = out.logits
            if task == CLASSIFICATION:
                labels = np.array([item.label for item in chunk], dtype=np.intp)
                losses.append(cross_entropy(logits, labels).item() * len(chunk))
                pred = np.argmax(logits.values, axis=1)
                correct += int(np.sum(pred == labels))
                total += len(chunk)
            else:
                labels = np.concatenate([item.label for item in chunk])
                losses.append(cross_entropy(logits, labels).item() * len(labels))
                pred = np.argmax(logits.values, axis=1)
                correct += int(np.sum(pred == labels))
                total += len(labels)
                for b in range(len(chunk)):
                    rows = slice(int(out.offsets[b]), int(out.offsets[b + 1]))
                    preds_per_cloud.append(pred[rows])
                    truths_per_cloud.append(np.asarray(chunk[b].label, dtype=np.intp))
    loss = float(np.sum(losses) / total)
    accuracy = correct / total
    if task == CLASSIFICATION:
        return Metrics(loss, accuracy)
    k = network.spec.n_outputs
    pooled = iou_per_class(np.concatenate(preds_per_cloud),
                           np.concatenate(truths_per_cloud), k)
    miou_cat = float(np.mean(list(pooled.values()))) if pooled else 0.0
    miou_inst = instance_miou(preds_per_cloud, truths_per_cloud, k)
    return Metrics(loss, accuracy, miou_cat, miou_inst, pooled)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

METRICS_HEADER = ["epoch", "split", "loss", "accuracy", "miou_cat", "miou_inst",
                  "lr", "seconds"]


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    accuracy: float
    miou_cat: float | None
    miou_inst: float | None
    lr: float
    seconds: float

    def as_csv(self) -> list[str]:
        fmt = lambda x: "" if x is None else f"{x:.6f}"
        return [str(self.epoch), self.split, f"{self.loss:.6f}", f"{self.accuracy:.6f}",
                fmt(self.miou_cat), fmt(self.miou_inst), f"{self.lr:.6g}",
                f"{self.seconds:.3f}"]


def write_metrics_csv(rows: Sequence[MetricsRow], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow(row.as_csv())


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    seed: int = 0
    deterministic: bool = False
    lr: float = 1e-3
    lr_decay: float = 0.7
    lr_decay_every: int = 80
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    out_dir: str | Path | None = None
    target_accuracy: float | None = None
    target_miou: float | None = None
    log: Callable[[str], None] | None = None


@dataclass
class TrainResult:
    rows: list[MetricsRow]
    best_metrics: Metrics
    best_epoch: int
    checkpoint_path: Path | None
    network: Network
    optim: OptimState


def _selection_score(metrics: Metrics, task: str) -> float:
    if task == SEGMENTATION and metrics.miou_inst is not None:
        return metrics.miou_inst
    return metrics.accuracy


def train(network: Network, train_set: Sequence[LabeledCloud],
          val_set: Sequence[LabeledCloud], config: TrainConfig) -> TrainResult:
    """Epoch loop of augment, forward, loss, backward, Adam step.

    Appends one train row and one val row per epoch; keeps the best-val
    checkpoint. A non-finite loss aborts with the last good checkpoint
    on disk. In deterministic mode the logged wall time is written as 0
    so reruns with the same seed produce identical logs.
    """
    from .checkpoint import save_checkpoint

    if not train_set:
        raise InputError("training set is empty")
    task = network.spec.task
    params = network.named_parameters()
    optim = OptimState(lr=config.lr, decay=config.lr_decay,
                       decay_every=config.lr_decay_every)
    rng = np.random.default_rng(config.seed)
    out_dir = Path(config.out_dir) if config.out_dir is not None else None
    checkpoint_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = out_dir / "best.icnn"
    rows: list[MetricsRow] = []
    best_score = -np.inf
    best_metrics: Metrics | None = None
    best_epoch = -1
    log = config.log or (lambda msg: None)
    items = list(train_set)
    for epoch in range(config.epochs):
        started = time.perf_counter()
        order = rng.permutation(len(items))
        epoch_loss = 0.0
        epoch_correct = 0
        epoch_total = 0
        for batch_ids in _batches(order, config.batch_size):
            chunk = [items[i] for i in batch_ids]
            clouds = [augment(item.cloud, config.augment, rng) for item in chunk]
            if task == CLASSIFICATION:
                labels = np.array([item.label for item in chunk], dtype=np.intp)
            else:
                labels = np.concatenate([np.asarray(item.label, dtype=np.intp)
                                         for item in chunk])
            reset_tape()
            out = network.forward(clouds, training=True)
            loss = cross_entropy(out.logits, labels)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                if out_dir is not None:
                    write_metrics_csv(rows, out_dir / "metrics.csv")
                raise TrainingError(
                    f"loss diverged at epoch {epoch}; last good checkpoint: "
                    f"{checkpoint_path if best_epoch >= 0 else 'none'}")
            backward(loss)
            adam_step(params, optim, epoch)
            zero_grads(t for _, t in params)
            reset_tape()
            n = len(labels)
            epoch_loss += loss_val * n
            epoch_correct += int(np.sum(np.argmax(out.logits.values, axis=1) == labels))
            epoch_total += n
        seconds = 0.0 if config.deterministic else time.perf_counter() - started
        lr_now = optim.scheduled_lr(epoch)
        rows.append(MetricsRow(epoch, "train", epoch_loss / epoch_total,
                               epoch_correct / epoch_total, None, None, lr_now, seconds))
        val_start = time.perf_counter()
        val = evaluate(network, val_set, task, config.batch_size)
        val_seconds = 0.0 if config.deterministic else time.perf_counter() - val_start
        rows.append(MetricsRow(epoch, "val", val.loss, val.accuracy, val.miou_cat,
                               val.miou_inst, lr_now, val_seconds))
        log(f"epoch {epoch}: train_loss={epoch_loss / epoch_total:.4f} "
            f"val_acc={val.accuracy:.4f}"
            + (f" val_miou={val.miou_inst:.4f}" if val.miou_inst is not None else ""))
        score = _selection_score(val, task)
        if score > best_score:
            best_score = score
            best_metrics = val
            best_epoch = epoch
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, network, optim,
                                extra={"epoch": epoch, "val_accuracy": val.accuracy})
        if _reached_targets(val, config):
            log(f"early stop at epoch {epoch}: targets reached")
            break
    if out_dir is not None:
        write_metrics_csv(rows, out_dir / "metrics.csv")
    return TrainResult(rows, best_metrics, best_epoch, checkpoint_path, network, optim)


def _reached_targets(metrics: Metrics, config: TrainConfig) -> bool:
    targets = []
    if config.target_accuracy is not None:
        targets.append(metrics.accuracy >= config.target_accuracy)
    if config.target_miou is not None:
        targets.append(metrics.miou_inst is not None
                       and metrics.miou_inst >= config.target_miou)
    return bool(targets) and all(targets)
