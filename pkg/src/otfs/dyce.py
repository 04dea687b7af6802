"""Dynamic clustered memory for positive mining.

The memory holds up to ``capacity`` embeddings split into ``partitions``
clusters, each summarized by a prototype.  Two paths act on it per batch:

* enhancement: every batch row is assigned to its nearest prototype and the
  ``k`` closest stored embeddings from that partition are appended to the
  batch;
* update: the batch is spread over the partitions by an equipartitioned
  transport plan, prototypes follow an EMA of their new members, and the
  oldest rows are dequeued.

``fifo`` and ``kmeans`` variants are the degenerate ablations: no partitions
(plain global top-k), and nearest-centroid assignment instead of transport.

States are treated as values: every operation returns a new
:class:`MemoryState` and leaves its input untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .clustering import davies_bouldin, kmeans, nearest, sq_dists
from .errors import MetricUndefinedError, NormalizationError, PreconditionError, ShapeError
from .ot import SinkhornConfig, TransportPlan, pairwise_cost, sinkhorn, uniform

VARIANTS = ("full", "fifo", "kmeans")
PROTOTYPE_RULES = ("ema", "mean")


@dataclass(frozen=True)
class DyceConfig:
    capacity: int = 512
    partitions: int = 16
    neighbors: int = 3
    epoch_threshold: int = 0
    prototype_ema: float = 0.9
    variant: str = "full"
    prototype_rule: str = "ema"
    normalize: bool = True

    def __post_init__(self):
        if not self.capacity >= self.partitions >= 1:
            raise ValueError(f"need capacity >= partitions >= 1, got {self.capacity}, {self.partitions}")
        if self.neighbors < 0:
            raise ValueError("neighbors must be >= 0")
        if not 0.0 <= self.prototype_ema <= 1.0:
            raise ValueError("prototype_ema must lie in [0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.prototype_rule not in PROTOTYPE_RULES:
            raise ValueError(f"prototype_rule must be one of {PROTOTYPE_RULES}")

    def check_batch_rows(self, rows: int) -> None:
        if rows < 1 or self.capacity % rows:
            raise PreconditionError(f"capacity {self.capacity} is not a multiple of the batch row count {rows}")


@dataclass
class MemoryState:
    """Stored embeddings plus bookkeeping.

    ``stamps`` are monotone insertion counters (one per row, never reset);
    the age of a slot is ``clock - stamp`` so the newest slot has age 1.
    ``assignments`` is -1 until partitions are bootstrapped.  ``labels`` is an
    optional ground-truth label per slot, used only for purity diagnostics.
    """

    capacity: int
    slots: np.ndarray
    stamps: np.ndarray
    assignments: np.ndarray
    prototypes: np.ndarray | None = None
    initialized: bool = False
    clock: int = 0
    labels: np.ndarray | None = None
    last_plan: TransportPlan | None = field(default=None, repr=False)

    @classmethod
    def empty(cls, capacity: int, dim: int, with_labels: bool = False) -> "MemoryState":
        return cls(
            capacity=capacity,
            slots=np.empty((0, dim)),
            stamps=np.empty(0, dtype=np.int64),
            assignments=np.empty(0, dtype=np.int64),
            labels=np.empty(0, dtype=np.int64) if with_labels else None,
        )

    @property
    def filled(self) -> int:
        return self.slots.shape[0]

    @property
    def dim(self) -> int:
        return self.slots.shape[1]

    @property
    def full(self) -> bool:
        return self.filled == self.capacity

    @property
    def ages(self) -> np.ndarray:
        return self.clock - self.stamps

    def partition_sizes(self, partitions: int) -> np.ndarray:
        return np.bincount(self.assignments[self.assignments >= 0], minlength=partitions)


@dataclass
class EnhancedBatch:
    """Batch rows followed by mined neighbors, grouped by source row.

    Row ``2B + i*k + j`` is the j-th neighbor of batch row ``i``;
    ``neighbor_slots[i, j]`` is its slot index in the memory it came from.
    """

    rows: np.ndarray
    source_index: np.ndarray
    neighbor_slots: np.ndarray

    @property
    def batch_rows(self) -> int:
        return self.neighbor_slots.shape[0]

    @property
    def k(self) -> int:
        return self.neighbor_slots.shape[1]

    def __len__(self) -> int:
        return self.rows.shape[0]


def _unit_rows(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NormalizationError("cannot normalize a zero-norm embedding")
    return z / norms


def _prepare(batch, cfg: DyceConfig | None, dim: int | None = None) -> np.ndarray:
    z = np.asarray(batch, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {z.shape}")
    if dim is not None and z.shape[1] != dim:
        raise ShapeError(f"batch dim {z.shape[1]} != memory dim {dim}")
    if cfg is None or cfg.normalize:
        z = _unit_rows(z)
    return z


def _labels_for(state: MemoryState, labels, n: int):
    if state.labels is None:
        return None
    if labels is None:
        raise PreconditionError("memory tracks labels; batch labels are required")
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.shape[0] != n:
        raise ShapeError("one label per batch row required")
    return labels


def ingest_fill(state: MemoryState, batch, cfg: DyceConfig | None = None, labels=None) -> MemoryState:
    """Append a batch while the memory is still filling up."""
    z = _prepare(batch, cfg, state.dim)
    n = z.shape[0]
    if state.full:
        raise PreconditionError("memory is full; use update_memory")
    if n > state.capacity - state.filled:
        raise PreconditionError(f"batch of {n} rows overflows capacity ({state.filled}/{state.capacity} filled)")
    lab = _labels_for(state, labels, n)
    return replace(
        state,
        slots=np.vstack([state.slots, z]),
        stamps=np.concatenate([state.stamps, state.clock + np.arange(n)]),
        assignments=np.concatenate([state.assignments, np.full(n, -1, dtype=np.int64)]),
        labels=None if lab is None else np.concatenate([state.labels, lab]),
        clock=state.clock + n,
    )


def bootstrap_partitions(state: MemoryState, cfg: DyceConfig, seed=0) -> MemoryState:
    """Initialize partitions and prototypes with one k-means run over the full memory."""
    if not state.full:
        raise PreconditionError(f"bootstrap needs a full memory ({state.filled}/{state.capacity})")
    if state.initialized:
        raise PreconditionError("partitions are already initialized")
    centers, assign = kmeans(state.slots, cfg.partitions, seed=seed)
    return replace(state, prototypes=centers, assignments=assign.astype(np.int64), initialized=True)


def assign_nearest_prototype(batch, prototypes) -> np.ndarray:
    z = np.asarray(batch, dtype=np.float64)
    return nearest(z, np.asarray(prototypes, dtype=np.float64))


def _ordered(d: np.ndarray, idx: np.ndarray) -> np.ndarray:
    # stable sort keeps ties in slot order
    return idx[np.argsort(d[idx], kind="stable")]


def topk_enhance(state: MemoryState, batch, cfg: DyceConfig) -> EnhancedBatch:
    """Append the ``k`` nearest stored embeddings of each batch row.

    Neighbors come from the partition of the row's nearest prototype.  When
    that partition has fewer than ``k`` members, the remainder is taken from
    the global nearest-first order over the whole store (skipping rows already
    picked).  The ``fifo`` variant always searches the whole store.
    """
    raw = np.asarray(batch, dtype=np.float64)
    z = _prepare(raw, cfg, state.dim)
    n, k = z.shape[0], cfg.neighbors
    if cfg.variant != "fifo" and not state.initialized:
        raise PreconditionError("enhancement needs bootstrapped partitions")
    if k > state.filled:
        raise PreconditionError(f"k={k} exceeds the {state.filled} stored embeddings")
    picked = np.empty((n, k), dtype=np.int64)
    if k:
        d = sq_dists(z, state.slots)
        everything = np.arange(state.filled)
        if cfg.variant == "fifo":
            for i in range(n):
                picked[i] = _ordered(d[i], everything)[:k]
        else:
            nu = assign_nearest_prototype(z, state.prototypes)
            for i in range(n):
                members = _ordered(d[i], np.flatnonzero(state.assignments == nu[i]))[:k]
                if members.shape[0] < k:
                    rest = _ordered(d[i], everything)
                    rest = rest[~np.isin(rest, members)][: k - members.shape[0]]
                    members = np.concatenate([members, rest])
                picked[i] = members
    rows = np.vstack([raw, state.slots[picked.ravel()]])
    source = np.concatenate([np.arange(n), np.repeat(np.arange(n), k)])
    return EnhancedBatch(rows=rows, source_index=source, neighbor_slots=picked)


def identity_enhancement(batch) -> EnhancedBatch:
    """The un-enhanced batch (enhancement path inactive)."""
    raw = np.asarray(batch, dtype=np.float64)
    n = raw.shape[0]
    return EnhancedBatch(rows=raw.copy(), source_index=np.arange(n), neighbor_slots=np.empty((n, 0), dtype=np.int64))


def update_memory(
    state: MemoryState,
    batch,
    cfg: DyceConfig,
    sinkhorn_cfg: SinkhornConfig | None = None,
    labels=None,
) -> MemoryState:
    """Insert a batch into a full memory and dequeue the same number of oldest rows."""
    if not state.full:
        raise PreconditionError(f"update needs a full memory ({state.filled}/{state.capacity})")
    partitioned = cfg.variant != "fifo"
    if partitioned and not state.initialized:
        raise PreconditionError("partitions must be bootstrapped before updates")
    z = _prepare(batch, cfg, state.dim)
    n = z.shape[0]
    if n > state.capacity:
        raise PreconditionError("batch larger than memory")
    lab = _labels_for(state, labels, n)

    plan = None
    prototypes = state.prototypes
    if cfg.variant == "full":
        cost = pairwise_cost(z, prototypes, "squared-euclidean")
        plan = sinkhorn(cost, uniform(n), uniform(cfg.partitions), sinkhorn_cfg)
        assign = np.argmax(plan.values, axis=1)
    elif cfg.variant == "kmeans":
        assign = assign_nearest_prototype(z, prototypes)
    else:
        assign = np.full(n, -1, dtype=np.int64)

    if partitioned and cfg.prototype_rule == "ema":
        prototypes = prototypes.copy()
        eta = cfg.prototype_ema
        for j in np.unique(assign):
            prototypes[j] = eta * prototypes[j] + (1.0 - eta) * z[assign == j].mean(axis=0)

    slots = np.vstack([state.slots, z])
    stamps = np.concatenate([state.stamps, state.clock + np.arange(n)])
    assignments = np.concatenate([state.assignments, assign.astype(np.int64)])
    all_labels = None if lab is None else np.concatenate([state.labels, lab])

    # dequeue: the n smallest stamps are the n greatest ages
    keep = np.sort(np.argsort(stamps, kind="stable")[n:])
    slots, stamps, assignments = slots[keep], stamps[keep], assignments[keep]
    if all_labels is not None:
        all_labels = all_labels[keep]

    if partitioned and cfg.prototype_rule == "mean":
        prototypes = prototypes.copy()
        for j in np.unique(assignments):
            prototypes[j] = slots[assignments == j].mean(axis=0)

    return replace(
        state,
        slots=slots,
        stamps=stamps,
        assignments=assignments,
        prototypes=prototypes,
        labels=all_labels,
        clock=state.clock + n,
        last_plan=plan,
    )


def dbi(state: MemoryState, partitions: int | None = None) -> float:
    """Davies-Bouldin index of the memory partitions (lower is better)."""
    if not state.initialized:
        raise MetricUndefinedError("memory partitions are not initialized")
    p = partitions if partitions is not None else state.prototypes.shape[0]
    return davies_bouldin(state.slots, state.assignments, p)


def positive_purity(state: MemoryState, enhanced: EnhancedBatch, true_labels) -> float:
    """Fraction of mined neighbors sharing their source row's true label.

    ``state`` must be the memory the neighbors were mined from.
    """
    if state.labels is None or true_labels is None:
        raise MetricUndefinedError("purity needs labels for memory slots and batch rows")
    if enhanced.k == 0:
        raise MetricUndefinedError("purity is undefined without neighbors (k=0)")
    true_labels = np.asarray(true_labels).ravel()
    if true_labels.shape[0] != enhanced.batch_rows:
        raise ShapeError("one label per batch row required")
    neighbor_labels = state.labels[enhanced.neighbor_slots]
    return float(np.mean(neighbor_labels == true_labels[:, None]))


@dataclass
class StepOutcome:
    state: MemoryState
    enhanced: EnhancedBatch
    purity: float | None = None


def dyce_step(
    state: MemoryState,
    batch,
    cfg: DyceConfig,
    *,
    epoch: int = 0,
    sinkhorn_cfg: SinkhornConfig | None = None,
    seed=0,
    labels=None,
) -> StepOutcome:
    """One pass of the memory over a batch of ``2B`` embeddings.

    Fill phase: store the batch, then bootstrap partitions once the memory is
    full.  Afterwards: enhance (when ``epoch >= cfg.epoch_threshold``) from
    the pre-update memory, then update.
    """
    batch = np.asarray(batch, dtype=np.float64)
    cfg.check_batch_rows(batch.shape[0])
    if not state.full:
        state = ingest_fill(state, batch, cfg, labels)
        if state.full and cfg.variant != "fifo":
            state = bootstrap_partitions(state, cfg, seed)
        return StepOutcome(state, identity_enhancement(batch))

    purity = None
    if epoch >= cfg.epoch_threshold and cfg.neighbors > 0:
        enhanced = topk_enhance(state, batch, cfg)
        if labels is not None and state.labels is not None:
            purity = positive_purity(state, enhanced, labels)
    else:
        enhanced = identity_enhancement(batch)
    state = update_memory(state, batch, cfg, sinkhorn_cfg, labels)
    return StepOutcome(state, enhanced, purity)
