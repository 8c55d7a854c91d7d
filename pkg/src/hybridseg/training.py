"""Loss, optimizer, schedule, metrics, and the train/eval loops.

Desk-scale defaults (batch 2, 1e-3 peak rate, 100 epochs) live here; the
full-scale recipe (batch 12, 800 epochs) ships as the ``full`` preset and is
not exercised by the test suite.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import InputError, ModelDataMismatch, NumericError
from .fileio import save_tensors
from .network import (
    ForwardPlan,
    NetworkConfig,
    NetworkParams,
    build_plan,
    forward_on_plan,
    init_network_params,
    named_parameters,
)
from .pointcloud import PointCloud

from . import tensor as T

OPT_PREFIX = "opt/"


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


def cross_entropy(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    """Mean negative log-likelihood over points whose label is not -1."""
    labels = np.asarray(labels, dtype=np.int64)
    p, k = logits.shape
    if labels.shape != (p,):
        raise InputError(f"labels shape {labels.shape} does not match logits rows {p}")
    scored = labels >= 0
    n = int(scored.sum())
    if n == 0:
        raise InputError("cross_entropy: every point is ignore-labeled")
    if labels.max() >= k:
        raise InputError(f"label {labels.max()} outside [0, {k})")
    ld = logits.data
    lse = logsumexp(ld, axis=1)
    picked = ld[np.arange(p), np.clip(labels, 0, k - 1)]
    loss = float((lse[scored] - picked[scored]).sum() / n)

    def backward(g):
        soft = np.exp(ld - lse[:, None])
        soft[np.arange(p), np.clip(labels, 0, k - 1)] -= 1.0
        soft[~scored] = 0.0
        return (soft * (g.reshape(-1)[0] / n),)

    return T.from_op(np.array(loss), (logits,), backward)


# --------------------------------------------------------------------------
# Optimizer and schedule
# --------------------------------------------------------------------------


@dataclass
class AdamWState:
    """Per-parameter moment estimates keyed by parameter name."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, named: list[tuple[str, T.Tensor]]) -> "AdamWState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in named},
            v={name: np.zeros_like(t.data) for name, t in named},
        )


def adamw_step(
    named: list[tuple[str, T.Tensor]],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One decoupled-weight-decay Adam update from each tensor's ``.grad``."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in named:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= lr * update
        if weight_decay:
            p.data -= lr * weight_decay * p.data  # decoupled from the gradient path


def onecycle_lr(
    step: int,
    total_steps: int,
    max_lr: float,
    pct_start: float = 1 / 3,
    div: float = 25.0,
    final_div: float = 1e4,
) -> float:
    """Cosine warmup to max_lr, then cosine anneal to max_lr/final_div."""
    if not 0 <= step <= total_steps:
        raise InputError(f"schedule step {step} outside [0, {total_steps}]")
    warm = pct_start * total_steps
    start_lr = max_lr / div
    final_lr = max_lr / final_div
    if step <= warm:
        u = step / warm if warm > 0 else 1.0
        return start_lr + (max_lr - start_lr) * 0.5 * (1.0 - math.cos(math.pi * u))
    v = (step - warm) / (total_steps - warm)
    return final_lr + (max_lr - final_lr) * 0.5 * (1.0 + math.cos(math.pi * v))


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    num_classes: int
    counts: np.ndarray = field(default=None)  # (K, K); rows true, cols predicted

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def update(self, predictions: np.ndarray, labels: np.ndarray) -> None:
        predictions = np.asarray(predictions, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        scored = labels >= 0
        np.add.at(self.counts, (labels[scored], predictions[scored]), 1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / max(self.total, 1))


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where a class never occurs) and mean IoU percent."""
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    valid = denom > 0
    if not valid.any():
        raise InputError("mIoU undefined: every class is empty")
    ious = np.full(cm.num_classes, np.nan)
    ious[valid] = tp[valid] / denom[valid]
    return ious, float(100.0 * ious[valid].mean())


# --------------------------------------------------------------------------
# Train / eval loops
# --------------------------------------------------------------------------


@dataclass
class TrainHyper:
    epochs: int = 100
    batch_size: int = 2
    max_lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    pct_start: float = 1 / 3
    div: float = 25.0
    final_div: float = 1e4
    seed: int = 0
    rotate_augment: bool = False


@dataclass
class TrainResult:
    best_miou: float
    best_epoch: int
    final_train_loss: float
    rows: list[dict]
    checkpoint_path: Path | None
    log_path: Path | None
    params: NetworkParams | None = None


def checkpoint_tensors(params: NetworkParams, state: AdamWState | None = None) -> dict[str, np.ndarray]:
    named = {name: t.data for name, t in named_parameters(params)}
    if state is not None:
        for key, arr in state.m.items():
            named[f"{OPT_PREFIX}m/{key}"] = arr
        for key, arr in state.v.items():
            named[f"{OPT_PREFIX}v/{key}"] = arr
        named[f"{OPT_PREFIX}step"] = np.array(float(state.step))
    return named


def load_checkpoint_into(params: NetworkParams, tensors: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays over a freshly initialized parameter tree."""
    for name, t in named_parameters(params):
        if name not in tensors:
            raise ModelDataMismatch(f"checkpoint is missing parameter {name!r}")
        arr = tensors[name]
        if tuple(arr.shape) != t.shape:
            raise ModelDataMismatch(
                f"checkpoint tensor {name!r} has shape {tuple(arr.shape)}, model needs {t.shape}"
            )
        t.data[:] = arr


def _rotate_about_z(pc: PointCloud, angle: float) -> PointCloud:
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    pos = pc.positions @ rot.T
    pos -= pos.min(axis=0)  # keep coordinates in the positive octant
    return PointCloud(pos, pc.features, pc.labels)


def evaluate(
    cfg: NetworkConfig,
    params: NetworkParams,
    scenes: list[PointCloud],
    plans: list[ForwardPlan] | None = None,
) -> tuple[ConfusionMatrix, float, float]:
    """Confusion matrix, mean IoU percent, and point accuracy over scenes."""
    cm = ConfusionMatrix(cfg.num_classes)
    for i, pc in enumerate(scenes):
        plan = plans[i] if plans is not None else build_plan(pc, cfg)
        logits = forward_on_plan(plan, cfg, params, point_features=T.Tensor(pc.features))
        cm.update(np.argmax(logits.data, axis=1), pc.labels)
    _, mean_iou = miou(cm)
    return cm, mean_iou, cm.accuracy


def train(
    cfg: NetworkConfig,
    hyper: TrainHyper,
    train_scenes: list[PointCloud],
    val_scenes: list[PointCloud] | None = None,
    out_dir: str | Path | None = None,
    params: NetworkParams | None = None,
) -> TrainResult:
    """Optimize on shuffled mini-batches; logs one CSV row per epoch.

    The best validation-mIoU checkpoint (parameters plus optimizer moments
    under the ``opt/`` name prefix) is kept when ``out_dir`` is given.
    Validation defaults to the training scenes, which is the overfit harness.
    """
    if not train_scenes:
        raise InputError("train: dataset is empty")
    val_scenes = val_scenes if val_scenes is not None else train_scenes
    rng = np.random.default_rng(hyper.seed)
    if params is None:
        params = init_network_params(rng, cfg)
    named = named_parameters(params)
    state = AdamWState.for_params(named)

    plans = [build_plan(pc, cfg) for pc in train_scenes]
    val_plans = [build_plan(pc, cfg) for pc in val_scenes]

    steps_per_epoch = math.ceil(len(train_scenes) / hyper.batch_size)
    total_steps = hyper.epochs * steps_per_epoch
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "best.htm" if out_dir is not None else None
    log_path = out_dir / "metrics.csv" if out_dir is not None else None

    rows: list[dict] = []
    best_miou, best_epoch = -1.0, -1
    step = 0
    lr = onecycle_lr(0, total_steps, hyper.max_lr, hyper.pct_start, hyper.div, hyper.final_div)
    epoch_loss = float("nan")
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(train_scenes))
        losses = []
        for b0 in range(0, len(order), hyper.batch_size):
            batch = order[b0 : b0 + hyper.batch_size]
            lr = onecycle_lr(
                step, total_steps, hyper.max_lr, hyper.pct_start, hyper.div, hyper.final_div
            )
            for _, p in named:
                p.zero_grad()
            batch_losses = []
            for idx in batch:
                pc = train_scenes[idx]
                if hyper.rotate_augment:
                    pc = _rotate_about_z(pc, rng.uniform(0.0, 2.0 * math.pi))
                    plan = build_plan(pc, cfg)
                else:
                    plan = plans[idx]
                loss = _scene_loss(plan, cfg, params, pc, scale=1.0 / len(batch))
                batch_losses.append(loss)
            batch_loss = float(np.sum(batch_losses))
            if not math.isfinite(batch_loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(seed {hyper.seed}, scenes {sorted(int(i) for i in batch)})"
                )
            adamw_step(named, state, lr, hyper.betas, hyper.eps, hyper.weight_decay)
            losses.append(batch_loss)
            step += 1
        epoch_loss = float(np.mean(losses))
        _, val_miou, _ = evaluate(cfg, params, val_scenes, val_plans)
        rows.append(
            {
                "epoch": epoch,
                "step": step,
                "lr": lr,
                "train_loss": epoch_loss,
                "val_miou": val_miou,
            }
        )
        if val_miou > best_miou:
            best_miou, best_epoch = val_miou, epoch
            if ckpt_path is not None:
                save_tensors(ckpt_path, checkpoint_tensors(params, state))
    if log_path is not None:
        write_metric_log(log_path, rows)
    return TrainResult(
        best_miou=best_miou,
        best_epoch=best_epoch,
        final_train_loss=epoch_loss,
        rows=rows,
        checkpoint_path=ckpt_path,
        log_path=log_path,
        params=params,
    )


def _scene_loss(plan, cfg, params, pc, scale: float) -> float:
    """Forward/backward one scene, accumulating scaled gradients."""
    tape = T.Tape()
    with tape:
        logits = forward_on_plan(plan, cfg, params, point_features=T.Tensor(pc.features))
        loss = cross_entropy(logits, pc.labels)
        scaled = T.scale(loss, scale)
    tape.backward(scaled)
    return scaled.item()


def write_metric_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "step", "lr", "train_loss", "val_miou"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
