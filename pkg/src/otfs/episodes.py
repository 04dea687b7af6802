"""Episodic few-shot evaluation on embedding sets.

Includes a synthetic embedding generator with an optional support-side
sample bias: each class's rows are split into a query population around the
class center and a support population whose mean is displaced by
``bias_shift * within_std`` along a fixed per-class direction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CapacityError, OTFSError, PreconditionError, SampleBiasError, ShapeError
from .opta import (
    NearestPrototype,
    OptaConfig,
    check_query_support_balance,
    class_prototypes,
    fit_logistic,
    opta_iterate,
    predict,
)
from .ot import SinkhornConfig

CLASSIFIERS = ("logreg", "proto")


@dataclass
class LabeledEmbeddingSet:
    embeddings: np.ndarray
    labels: np.ndarray | None
    # True for rows drawn from the (possibly shifted) support population
    support_pool: np.ndarray | None = None
    centers: np.ndarray | None = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ShapeError("need a 2-D embedding matrix")
        if self.labels is None:
            return
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.labels.shape[0] != self.embeddings.shape[0]:
            raise ShapeError("need one label per embedding row")
        if np.any(self.labels < 0):
            raise ValueError("labels must be nonnegative")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    @property
    def classes(self) -> np.ndarray:
        if self.labels is None:
            raise PreconditionError("embedding set carries no labels")
        return np.unique(self.labels)


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 10
    dim: int = 16
    center_scale: float = 1.0
    within_std: float = 1.0
    bias_shift: float = 0.0
    samples_per_class: int = 100
    seed: int = 0
    # share of each class's rows drawn from the support population
    support_fraction: float = 0.5

    def __post_init__(self):
        if min(self.classes, self.dim, self.samples_per_class) < 1:
            raise ValueError("classes, dim and samples_per_class must be positive")
        if not 0.0 < self.support_fraction < 1.0:
            raise ValueError("support_fraction must lie in (0, 1)")
        if not (self.center_scale > 0 and self.within_std > 0):
            raise ValueError("center_scale and within_std must be positive")
        if self.bias_shift < 0:
            raise ValueError("bias_shift must be >= 0")


def expected_center_distance(center_scale: float, dim: int) -> float:
    """E|c_i - c_j| for independent centers ~ N(0, center_scale^2 I_dim)."""
    mean_chi = math.sqrt(2.0) * math.exp(math.lgamma((dim + 1) / 2) - math.lgamma(dim / 2))
    return center_scale * math.sqrt(2.0) * mean_chi


def center_scale_for_separation(separation: float, dim: int) -> float:
    """Center scale giving an expected inter-center distance of ``separation``."""
    return separation / expected_center_distance(1.0, dim)


def gen_synthetic(spec: SyntheticSpec) -> LabeledEmbeddingSet:
    """Gaussian class clusters with ``samples_per_class`` rows per class.

    Rows are ordered query population first, then support population, each
    grouped by class.
    """
    rng = np.random.default_rng(spec.seed)
    C, d, n, s = spec.classes, spec.dim, spec.samples_per_class, spec.within_std
    n_sup = int(n * spec.support_fraction)
    n_qry = n - n_sup
    centers = rng.normal(size=(C, d)) * spec.center_scale
    directions = rng.normal(size=(C, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    lq = np.repeat(np.arange(C), n_qry)
    ls = np.repeat(np.arange(C), n_sup)
    query_pop = centers[lq] + s * rng.normal(size=(C * n_qry, d))
    support_pop = centers[ls] + spec.bias_shift * s * directions[ls] + s * rng.normal(size=(C * n_sup, d))
    return LabeledEmbeddingSet(
        embeddings=np.vstack([query_pop, support_pop]),
        labels=np.concatenate([lq, ls]),
        support_pool=np.concatenate([np.zeros(C * n_qry, bool), np.ones(C * n_sup, bool)]),
        centers=centers,
    )


@dataclass(frozen=True)
class EpisodeSpec:
    ways: int = 5
    shots: int = 1
    queries: int = 15
    episodes: int = 600
    seed: int = 0

    def __post_init__(self):
        if self.ways < 2:
            raise ValueError("ways must be >= 2")
        if self.shots < 1 or self.episodes < 1:
            raise ValueError("shots and episodes must be >= 1")
        if not self.queries > self.shots:
            raise SampleBiasError(f"queries per class ({self.queries}) must exceed shots ({self.shots})")


@dataclass
class Episode:
    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    support_index: np.ndarray
    query_index: np.ndarray
    classes: np.ndarray


def sample_episode(data: LabeledEmbeddingSet, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
    """Draw one (N-way, K-shot) task with Q queries per class.

    When the set carries a support/query population split, supports come
    from the support population and queries from the query population.
    """
    N, K, Q = spec.ways, spec.shots, spec.queries
    if not Q > K:
        raise SampleBiasError(f"queries per class ({Q}) must exceed shots ({K})")
    pool = data.support_pool
    eligible = []
    for c in data.classes:
        rows = data.labels == c
        if pool is None:
            ok = rows.sum() >= K + Q
        else:
            ok = (rows & pool).sum() >= K and (rows & ~pool).sum() >= Q
        if ok:
            eligible.append(c)
    if len(eligible) < N:
        raise CapacityError(f"only {len(eligible)} classes have enough samples for {N}-way {K}-shot {Q}-query")
    chosen = np.sort(rng.choice(np.asarray(eligible), size=N, replace=False))
    s_idx, q_idx = [], []
    for c in chosen:
        rows = data.labels == c
        if pool is None:
            picks = rng.permutation(np.flatnonzero(rows))[: K + Q]
            s_idx.append(picks[:K])
            q_idx.append(picks[K:])
        else:
            s_idx.append(rng.choice(np.flatnonzero(rows & pool), size=K, replace=False))
            q_idx.append(rng.choice(np.flatnonzero(rows & ~pool), size=Q, replace=False))
    s_idx = np.concatenate(s_idx)
    q_idx = np.concatenate(q_idx)
    return Episode(
        support=data.embeddings[s_idx],
        support_labels=data.labels[s_idx],
        query=data.embeddings[q_idx],
        query_labels=data.labels[q_idx],
        support_index=s_idx,
        query_index=q_idx,
        classes=chosen,
    )


@dataclass(frozen=True)
class PipelineConfig:
    passes: int = 1
    classifier: str = "logreg"
    normalize: bool = True
    barycentric: bool = True
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    reg: float = 1e-3
    iters: int = 500
    lr: float = 0.1

    def __post_init__(self):
        if self.classifier not in CLASSIFIERS:
            raise ValueError(f"classifier must be one of {CLASSIFIERS}")

    @property
    def opta(self) -> OptaConfig:
        return OptaConfig(passes=self.passes, sinkhorn=self.sinkhorn, barycentric=self.barycentric)


def _l2(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms == 0, 1.0, norms)


@dataclass
class EpisodeResult:
    accuracy: float
    raw_prototypes: np.ndarray
    aligned_prototypes: np.ndarray
    predictions: np.ndarray


def run_episode(ep: Episode, pipeline: PipelineConfig) -> EpisodeResult:
    support, query = ep.support, ep.query
    if pipeline.normalize:
        support, query = _l2(support), _l2(query)
    protos = class_prototypes(support, ep.support_labels)
    if pipeline.passes:
        check_query_support_balance(support.shape[0], query.shape[0])
    aligned = opta_iterate(protos, query, pipeline.opta)
    if pipeline.classifier == "logreg":
        clf = fit_logistic(aligned, pipeline.reg, pipeline.iters, pipeline.lr)
    else:
        clf = NearestPrototype(aligned)
    pred = predict(clf, query)
    return EpisodeResult(float(np.mean(pred == ep.query_labels)), protos.values, aligned.values, pred)


@dataclass
class MetricsRecord:
    mean_accuracy: float
    std: float
    ci95_half_width: float
    per_episode_accuracies: list[float]
    dbi_trace: list | None = None
    ci_method: str = "normal approximation: 1.96 * sample std / sqrt(E)"

    @classmethod
    def from_accuracies(cls, accs, dbi_trace=None) -> "MetricsRecord":
        accs = np.asarray(accs, dtype=np.float64)
        std = float(accs.std(ddof=1)) if accs.shape[0] > 1 else 0.0
        return cls(
            mean_accuracy=float(accs.mean()),
            std=std,
            ci95_half_width=1.96 * std / math.sqrt(accs.shape[0]),
            per_episode_accuracies=[float(a) for a in accs],
            dbi_trace=dbi_trace,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        if out["dbi_trace"] is None:
            del out["dbi_trace"]
        return out


class EpisodeFailure(OTFSError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"episode {index} failed: {type(cause).__name__}: {cause}")
        self.index = index
        self.cause = cause


def episode_rngs(seed: int, count: int) -> list[np.random.Generator]:
    """Independent per-episode generators split from one master seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def iter_episodes(data: LabeledEmbeddingSet, spec: EpisodeSpec):
    for i, rng in enumerate(episode_rngs(spec.seed, spec.episodes)):
        try:
            yield i, sample_episode(data, spec, rng)
        except OTFSError as e:
            raise EpisodeFailure(i, e) from e


def evaluate(data: LabeledEmbeddingSet, spec: EpisodeSpec, pipeline: PipelineConfig | None = None) -> MetricsRecord:
    pipeline = pipeline or PipelineConfig()
    accs = []
    for i, ep in iter_episodes(data, spec):
        try:
            accs.append(run_episode(ep, pipeline).accuracy)
        except OTFSError as e:
            raise EpisodeFailure(i, e) from e
    return MetricsRecord.from_accuracies(accs)


def stream_batches(n: int, batch_size: int, epochs: int, rng: np.random.Generator):
    """Yield ``(epoch, row_indices)``; each epoch is a fresh shuffle cut into
    ``n // batch_size`` batches, remainder dropped."""
    if isinstance(n, LabeledEmbeddingSet):
        n = len(n)
    if batch_size < 1 or batch_size > n:
        raise CapacityError(f"batch size {batch_size} not in [1, {n}]")
    per_epoch = n // batch_size
    for epoch in range(epochs):
        order = rng.permutation(n)
        for b in range(per_epoch):
            yield epoch, order[b * batch_size : (b + 1) * batch_size]
