"""Transductive prototype alignment at inference time.

Support prototypes are moved onto the query distribution: a balanced
transport plan between queries (uniform mass) and prototypes (uniform mass)
is normalized per query row, and each prototype is replaced by the
plan-weighted barycenter of the queries.  Passes can be chained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneratePlanError, PreconditionError, SampleBiasError, ShapeError
from .ot import SinkhornConfig, pairwise_cost, row_normalize, sinkhorn, uniform

MAX_PASSES = 5


@dataclass
class PrototypeSet:
    values: np.ndarray
    classes: np.ndarray

    def __len__(self) -> int:
        return self.values.shape[0]

    def with_values(self, values) -> "PrototypeSet":
        return PrototypeSet(np.asarray(values, dtype=np.float64), self.classes.copy())


@dataclass(frozen=True)
class OptaConfig:
    passes: int = 1
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    metric: str = "squared-euclidean"
    # False reproduces the unrescaled product (row-normalized plan)^T @ queries
    barycentric: bool = True
    max_passes: int = MAX_PASSES

    def __post_init__(self):
        if not 0 <= self.passes <= self.max_passes:
            raise ValueError(f"passes must lie in [0, {self.max_passes}], got {self.passes}")


def class_prototypes(support, labels) -> PrototypeSet:
    """Per-class mean of the support embeddings, rows in sorted-label order."""
    support = np.asarray(support, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    if support.ndim != 2 or labels.shape[0] != support.shape[0]:
        raise ShapeError("need one label per support row")
    if support.shape[0] == 0:
        raise PreconditionError("empty support set")
    classes = np.unique(labels)
    values = np.stack([support[labels == c].mean(axis=0) for c in classes])
    return PrototypeSet(values, classes)


def transport_weights(protos: PrototypeSet, queries, cfg: OptaConfig | None = None) -> np.ndarray:
    """N x NQ matrix whose row j gives prototype j's weights over the queries.

    With ``barycentric`` set, each row is nonnegative and sums to one.
    """
    cfg = cfg or OptaConfig()
    q = np.asarray(queries, dtype=np.float64)
    n_cls = len(protos)
    if n_cls < 2:
        raise PreconditionError("alignment needs at least two classes")
    if q.ndim != 2 or q.shape[1] != protos.values.shape[1]:
        raise ShapeError("query/prototype dimension mismatch")
    if q.shape[0] <= n_cls:
        raise PreconditionError(f"need more queries ({q.shape[0]}) than classes ({n_cls})")
    if np.all(q == q[0]):
        raise DegeneratePlanError("all query embeddings are identical")
    cost = pairwise_cost(q, protos.values, cfg.metric)
    plan = sinkhorn(cost, uniform(q.shape[0]), uniform(n_cls), cfg.sinkhorn)
    weights = row_normalize(plan).T
    if cfg.barycentric:
        mass = weights.sum(axis=1, keepdims=True)
        if np.any(mass <= 0):
            raise DegeneratePlanError("a prototype received no transport mass")
        weights = weights / mass
    return weights


def opta_pass(protos: PrototypeSet, queries, cfg: OptaConfig | None = None) -> PrototypeSet:
    w = transport_weights(protos, queries, cfg)
    return protos.with_values(w @ np.asarray(queries, dtype=np.float64))


def opta_iterate(protos: PrototypeSet, queries, cfg: OptaConfig | None = None) -> PrototypeSet:
    cfg = cfg or OptaConfig()
    out = protos.with_values(protos.values.copy())
    for _ in range(cfg.passes):
        out = opta_pass(out, queries, cfg)
    return out


def check_query_support_balance(n_support: int, n_query: int) -> None:
    """Alignment relies on more unlabeled queries than labeled supports."""
    if not n_query > n_support:
        raise SampleBiasError(f"need |Q| > |S| for alignment, got |Q|={n_query}, |S|={n_support}")


@dataclass
class LogisticClassifier:
    weight: np.ndarray  # d x N
    bias: np.ndarray  # N
    classes: np.ndarray

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"expected {self.weight.shape[0]}-dim inputs")
        return x @ self.weight + self.bias


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_logistic(protos: PrototypeSet, reg: float = 1e-3, iters: int = 500, lr: float = 0.1) -> LogisticClassifier:
    """Multinomial logistic regression on the prototype rows (one sample per class).

    Full-batch gradient descent from zero initialization with an L2 penalty
    on the weights; deterministic.
    """
    x = protos.values
    n_cls = len(protos)
    if n_cls < 2:
        raise PreconditionError("logistic regression needs at least two classes")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite prototype values")
    onehot = np.eye(n_cls)
    w = np.zeros((x.shape[1], n_cls))
    b = np.zeros(n_cls)
    for _ in range(iters):
        resid = (_softmax(x @ w + b) - onehot) / n_cls
        w -= lr * (x.T @ resid + reg * w)
        b -= lr * resid.sum(axis=0)
    return LogisticClassifier(w, b, protos.classes.copy())


@dataclass
class NearestPrototype:
    protos: PrototypeSet

    @property
    def classes(self):
        return self.protos.classes

    def logits(self, x) -> np.ndarray:
        return -pairwise_cost(x, self.protos.values, "squared-euclidean")


def predict(classifier, queries) -> np.ndarray:
    """Class label per query (argmax; ties toward the lowest class index)."""
    scores = classifier.logits(queries)
    return classifier.classes[np.argmax(scores, axis=1)]
