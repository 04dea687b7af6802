"""Desk-scale student/teacher pretraining with a clustered memory.

Each network is a single linear map.  Image augmentations become additive
Gaussian noise, and patch masking becomes a per-row random zero-mask over a
fixed fraction of input coordinates (student input only).  The memory is fed
teacher embeddings; its mined neighbors are appended to both the student
and the teacher batch, as constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .dyce import DyceConfig, MemoryState, dyce_step, dbi
from .episodes import LabeledEmbeddingSet, stream_batches
from .errors import MetricUndefinedError, ShapeError
from .loss import LossConfig, build_pair_map, loss_and_grad
from .ot import SinkhornConfig


@dataclass
class LinearEncoder:
    weight: np.ndarray  # d_in x d_out
    bias: np.ndarray

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "LinearEncoder":
        return cls(rng.normal(scale=1.0 / math.sqrt(d_in), size=(d_in, d_out)), np.zeros(d_out))

    def __call__(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weight + self.bias

    def copy(self) -> "LinearEncoder":
        return LinearEncoder(self.weight.copy(), self.bias.copy())

    @property
    def shape(self):
        return self.weight.shape


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 50
    learning_rate: float = 0.5
    teacher_momentum: float = 0.99
    mask_ratio: float = 0.3
    noise_std: float = 0.5
    out_dim: int = 16
    loss: LossConfig = field(default_factory=LossConfig)
    dyce: DyceConfig = field(default_factory=lambda: DyceConfig(capacity=256, partitions=10, neighbors=3, epoch_threshold=10))
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0.0 <= self.teacher_momentum <= 1.0:
            raise ValueError("teacher_momentum must lie in [0, 1]")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        self.dyce.check_batch_rows(2 * self.batch_size)


def ema_update(teacher: LinearEncoder, student: LinearEncoder, m: float) -> LinearEncoder:
    """``teacher <- m * teacher + (1 - m) * student`` for every parameter."""
    if teacher.shape != student.shape or teacher.bias.shape != student.bias.shape:
        raise ShapeError(f"encoder shapes differ: {teacher.shape} vs {student.shape}")
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    return LinearEncoder(m * teacher.weight + (1.0 - m) * student.weight, m * teacher.bias + (1.0 - m) * student.bias)


def mask_coordinates(x, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Zero ``floor(ratio * d)`` randomly chosen coordinates in every row."""
    x = np.array(x, dtype=np.float64)
    n, d = x.shape
    count = int(math.floor(ratio * d + 1e-9))
    if count:
        cols = np.argsort(rng.random((n, d)), axis=1)[:, :count]
        x[np.arange(n)[:, None], cols] = 0.0
    return x


class TwoViews(NamedTuple):
    view_a: np.ndarray
    view_b: np.ndarray
    student: np.ndarray  # masked [view_a; view_b]

    @property
    def teacher(self) -> np.ndarray:
        return np.vstack([self.view_a, self.view_b])


def two_views(batch, mask_ratio: float, noise_std: float, rng: np.random.Generator) -> TwoViews:
    x = np.asarray(batch, dtype=np.float64)
    a = x + noise_std * rng.normal(size=x.shape) if noise_std else x.copy()
    b = x + noise_std * rng.normal(size=x.shape) if noise_std else x.copy()
    return TwoViews(a, b, mask_coordinates(np.vstack([a, b]), mask_ratio, rng))


class StepResult(NamedTuple):
    student: LinearEncoder
    teacher: LinearEncoder
    memory: MemoryState
    loss: float
    enhanced_rows: int
    purity: float | None


def student_gradient(student: LinearEncoder, x_student, z_teacher, neighbors, batch_size: int, cfg: LossConfig):
    """Loss and its gradient with respect to the student's weight and bias.

    Teacher embeddings and neighbor rows enter as constants.
    """
    z_s = student(x_student)
    k = neighbors.shape[0] // (2 * batch_size)
    pair = build_pair_map(batch_size, k)
    value, grad = loss_and_grad(np.vstack([z_s, neighbors]), np.vstack([z_teacher, neighbors]), pair, cfg)
    g = grad[: 2 * batch_size]
    return value, np.asarray(x_student).T @ g, g.sum(axis=0)


def train_step(
    student: LinearEncoder,
    teacher: LinearEncoder,
    memory: MemoryState,
    batch,
    cfg: TrainConfig,
    *,
    epoch: int,
    rng: np.random.Generator,
    labels=None,
) -> StepResult:
    B = np.asarray(batch).shape[0]
    if B != cfg.batch_size:
        raise ShapeError(f"batch has {B} rows, config says {cfg.batch_size}")
    views = two_views(batch, cfg.mask_ratio, cfg.noise_std, rng)
    z_t = teacher(views.teacher)
    row_labels = None if labels is None else np.concatenate([labels, labels])
    out = dyce_step(memory, z_t, cfg.dyce, epoch=epoch, sinkhorn_cfg=cfg.sinkhorn, seed=cfg.seed, labels=row_labels)
    neighbors = out.enhanced.rows[2 * B :]
    value, d_w, d_b = student_gradient(student, views.student, z_t, neighbors, B, cfg.loss)
    lr = cfg.learning_rate
    new_student = LinearEncoder(student.weight - lr * d_w, student.bias - lr * d_b)
    new_teacher = ema_update(teacher, new_student, cfg.teacher_momentum)
    return StepResult(new_student, new_teacher, out.state, value, len(out.enhanced), out.purity)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    dbi: float | None
    enhanced_rows: int
    purity: float | None
    filled: int

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "mean_loss": self.mean_loss,
            "dbi": self.dbi,
            "enhanced_rows": self.enhanced_rows,
            "purity": self.purity,
            "filled": self.filled,
        }


@dataclass
class PretrainResult:
    trace: list[EpochRecord]
    student: LinearEncoder
    teacher: LinearEncoder
    memory: MemoryState

    @property
    def dbi_trace(self) -> list[float | None]:
        return [r.dbi for r in self.trace]


def _safe_dbi(memory: MemoryState, partitions: int):
    if not memory.initialized or partitions < 2:
        return None
    try:
        return dbi(memory, partitions)
    except MetricUndefinedError:
        return None


def run_pretraining(cfg: TrainConfig, data: LabeledEmbeddingSet, on_epoch=None) -> PretrainResult:
    """Train for ``cfg.epochs`` epochs and return the per-epoch trace.

    The memory fills during the first ``capacity / 2B`` steps, is
    bootstrapped by k-means once full, and enhancement starts at
    ``cfg.dyce.epoch_threshold``.  ``on_epoch`` (optional) receives each
    :class:`EpochRecord` as soon as it is available.
    """
    if len(data) < cfg.batch_size:
        raise ValueError(f"dataset has {len(data)} rows, fewer than batch size {cfg.batch_size}")
    rng = np.random.default_rng(cfg.seed)
    student = LinearEncoder.init(data.dim, cfg.out_dim, rng)
    teacher = student.copy()
    memory = MemoryState.empty(cfg.dyce.capacity, cfg.out_dim, with_labels=data.labeled)
    trace: list[EpochRecord] = []
    losses, purities, widest = [], [], 0
    current = 0

    def close_epoch(epoch):
        rec = EpochRecord(
            epoch=epoch,
            mean_loss=float(np.mean(losses)),
            dbi=_safe_dbi(memory, cfg.dyce.partitions),
            enhanced_rows=widest,
            purity=float(np.mean(purities)) if purities else None,
            filled=memory.filled,
        )
        trace.append(rec)
        if on_epoch is not None:
            on_epoch(rec)

    for epoch, idx in stream_batches(len(data), cfg.batch_size, cfg.epochs, rng):
        if epoch != current:
            close_epoch(current)
            losses, purities, widest, current = [], [], 0, epoch
        step = train_step(student, teacher, memory, data.embeddings[idx], cfg, epoch=epoch, rng=rng, labels=None if data.labels is None else data.labels[idx])
        student, teacher, memory = step.student, step.teacher, step.memory
        losses.append(step.loss)
        widest = max(widest, step.enhanced_rows)
        if step.purity is not None:
            purities.append(step.purity)
    if cfg.epochs:
        close_epoch(current)
    return PretrainResult(trace, student, teacher, memory)


def with_overrides(cfg: TrainConfig, **changes) -> TrainConfig:
    """Copy of ``cfg`` with top-level or ``dyce.*`` / ``loss.*`` fields replaced."""
    top, dyce, loss = {}, {}, {}
    for key, value in changes.items():
        if key.startswith("dyce."):
            dyce[key[5:]] = value
        elif key.startswith("loss."):
            loss[key[5:]] = value
        else:
            top[key] = value
    if dyce:
        top["dyce"] = replace(cfg.dyce, **dyce)
    if loss:
        top["loss"] = replace(cfg.loss, **loss)
    return replace(cfg, **top)
