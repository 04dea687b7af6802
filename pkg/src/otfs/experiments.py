"""Runnable experiment drivers shared by the CLI and the test-suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dyce import DyceConfig, MemoryState, dbi, dyce_step
from .episodes import EpisodeSpec, LabeledEmbeddingSet, PipelineConfig, evaluate, stream_batches
from .errors import ConfigError, MetricUndefinedError
from .ot import SinkhornConfig
from .pretrain import LinearEncoder, TrainConfig, run_pretraining, with_overrides

ABLATION_AXES = {
    # axis -> (TrainConfig field, default grid)
    "mask_ratio": ("mask_ratio", (0.1, 0.3, 0.5, 0.7)),
    "lambda": ("loss.lam", (0.0, 0.1, 0.3, 0.5)),
    "k": ("dyce.neighbors", (1, 3, 5, 10)),
    "P": ("dyce.partitions", (100, 200, 300, 500)),
    "M": ("dyce.capacity", (2048, 4096, 8192, 12288)),
    "variant": ("dyce.variant", ("fifo", "kmeans", "full")),
}


def ablation_grid(axis: str) -> tuple:
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    return ABLATION_AXES[axis][1]


def parse_axis_values(axis: str, text: str) -> tuple:
    """Comma-separated override of an axis grid, typed like the default grid."""
    default = ablation_grid(axis)
    if not text.strip():
        return default
    kind = type(default[0])
    try:
        return tuple(kind(v.strip()) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value list for axis {axis}: {text!r}") from None


@dataclass
class MemoryRecord:
    step: int
    dbi: float | None
    purity: float | None
    filled: int

    def to_dict(self) -> dict:
        return {"step": self.step, "dbi": self.dbi, "purity": self.purity, "filled": self.filled}


def simulate_memory(
    data: LabeledEmbeddingSet,
    cfg: DyceConfig,
    steps: int,
    rows_per_step: int,
    seed: int = 0,
    sinkhorn_cfg: SinkhornConfig | None = None,
):
    """Feed shuffled batches of raw embeddings through the memory.

    Enhancement is active as soon as the memory is full.  Yields one
    :class:`MemoryRecord` per step.
    """
    rng = np.random.default_rng(seed)
    cfg.check_batch_rows(rows_per_step)
    state = MemoryState.empty(cfg.capacity, data.dim, with_labels=data.labeled)
    batches = stream_batches(len(data), rows_per_step, epochs=10**9, rng=rng)
    for step in range(steps):
        _, idx = next(batches)
        labels = None if data.labels is None else data.labels[idx]
        out = dyce_step(state, data.embeddings[idx], cfg, epoch=step, sinkhorn_cfg=sinkhorn_cfg, seed=seed, labels=labels)
        state = out.state
        value = None
        if state.initialized:
            try:
                value = dbi(state, cfg.partitions)
            except MetricUndefinedError:
                value = None
        yield MemoryRecord(step, value, out.purity, state.filled)


def encode_set(encoder: LinearEncoder, data: LabeledEmbeddingSet) -> LabeledEmbeddingSet:
    return LabeledEmbeddingSet(encoder(data.embeddings), data.labels, data.support_pool, None)


def ablation_cell(base: TrainConfig, axis: str, value, data: LabeledEmbeddingSet, episodes: EpisodeSpec, pipeline: PipelineConfig) -> dict:
    """Pretrain with one axis value, then evaluate the student's embeddings."""
    key = ABLATION_AXES[axis][0]
    cfg = with_overrides(base, **{key: value})
    result = run_pretraining(cfg, data)
    metrics = evaluate(encode_set(result.student, data), episodes, pipeline)
    purities = [r.purity for r in result.trace if r.purity is not None]
    return {
        "axis": axis,
        "value": value,
        "mean_accuracy": metrics.mean_accuracy,
        "ci95_half_width": metrics.ci95_half_width,
        "final_dbi": result.trace[-1].dbi if result.trace else None,
        "mean_purity": float(np.mean(purities)) if purities else None,
    }
