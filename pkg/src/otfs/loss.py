"""Symmetric contrastive loss over enhanced student/teacher batches.

Row layout of an enhanced batch with ``B`` originals per view and ``k``
neighbors per original::

    [0, B)              view-a originals
    [B, 2B)             view-b originals
    [2B, 2B + 2Bk)      neighbor blocks, k rows per original, in source order

``d`` below is the negative cosine similarity.  With ``pair`` the positive
map and ``A`` the anchor rows (one per positive pair), the loss is::

    mean over (i, pair[i]), i in A, of  (d[s_i, t_pair(i)] + d[s_pair(i), t_i]) / 2
      - lam * log( (1/L) sum_i sum_{j != i, pair(i)} exp(d[s_i, s_j] / tau) )

For ``k = 0`` the first term is exactly ``(1/L) sum_{i<L/2} (...)``.  Teacher
rows are constants: gradients are taken with respect to student rows only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._numeric import logsumexp
from .errors import NormalizationError, PreconditionError, ShapeError

POSITIVE_SETS = ("all", "originals")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.1
    tau: float = 2.0
    # "originals" drops neighbor rows from the positive term (they stay negatives)
    positives: str = "all"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.positives not in POSITIVE_SETS:
            raise ValueError(f"positives must be one of {POSITIVE_SETS}")


def build_pair_map(batch_size: int, neighbors: int) -> np.ndarray:
    """Positive counterpart of every row of an enhanced batch.

    Originals pair across views (``i <-> i + B``); a neighbor row pairs with
    the other-view original of its source row.  The map restricted to the
    originals is an involution; neighbor rows point at originals.
    """
    B, k = batch_size, neighbors
    if B < 1 or k < 0:
        raise ValueError("need batch_size >= 1 and neighbors >= 0")
    originals = np.concatenate([np.arange(B, 2 * B), np.arange(B)])
    source = np.repeat(np.arange(2 * B), k)
    return np.concatenate([originals, originals[source]]).astype(np.int64)


def anchor_rows(pair: np.ndarray, positives: str = "all") -> np.ndarray:
    """One representative row per positive pair.

    Mutual pairs contribute their lower index; one-directional rows
    (neighbors) contribute themselves.
    """
    pair = np.asarray(pair)
    idx = np.arange(pair.shape[0])
    mutual = pair[pair] == idx
    keep = mutual & (idx < pair)
    if positives == "all":
        keep |= ~mutual
    return idx[keep]


def _check(z_s, z_t, pair):
    z_s = np.asarray(z_s, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    pair = np.asarray(pair, dtype=np.int64)
    if z_s.ndim != 2 or z_s.shape != z_t.shape:
        raise ShapeError(f"student/teacher shapes differ: {z_s.shape} vs {z_t.shape}")
    if pair.shape != (z_s.shape[0],):
        raise ShapeError("pair map length must equal the number of rows")
    if np.any(pair == np.arange(pair.shape[0])):
        raise ValueError("pair map has fixed points")
    return z_s, z_t, pair


def _unit(z):
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NormalizationError("zero-norm embedding row")
    return z / norms, norms


def loss_and_grad(z_s, z_t, pair, cfg: LossConfig | None = None, need_grad: bool = True):
    """Loss value and its gradient with respect to ``z_s`` (``None`` if not requested)."""
    cfg = cfg or LossConfig()
    z_s, z_t, pair = _check(z_s, z_t, pair)
    L = z_s.shape[0]
    u, norm_s = _unit(z_s)
    v, _ = _unit(z_t)

    a = anchor_rows(pair, cfg.positives)
    src = np.concatenate([a, pair[a]])
    dst = np.concatenate([pair[a], a])
    value = -float(np.mean(np.einsum("ij,ij->i", u[src], v[dst])))
    g_u = np.zeros_like(u) if need_grad else None
    if need_grad:
        np.add.at(g_u, src, -v[dst] / src.shape[0])

    if cfg.lam > 0:
        mask = np.ones((L, L), dtype=bool)
        mask[np.arange(L), np.arange(L)] = False
        mask[np.arange(L), pair] = False
        if not mask.any():
            raise PreconditionError(f"negative sum is empty for L={L}; need L >= 4 when lam > 0")
        logits = np.where(mask, -(u @ u.T) / cfg.tau, -np.inf)
        with np.errstate(divide="ignore"):
            log_total = logsumexp(logits)
        value -= cfg.lam * (log_total - np.log(L))
        if need_grad:
            w = np.exp(logits - log_total)
            g_u += (cfg.lam / cfg.tau) * (w + w.T) @ u

    if not need_grad:
        return value, None
    # chain rule through u = s / |s|
    radial = np.einsum("ij,ij->i", g_u, u)[:, None]
    grad = (g_u - radial * u) / norm_s
    return value, grad


def loss_value(z_s, z_t, pair, cfg: LossConfig | None = None) -> float:
    return loss_and_grad(z_s, z_t, pair, cfg, need_grad=False)[0]


def loss_grad_student(z_s, z_t, pair, cfg: LossConfig | None = None) -> np.ndarray:
    return loss_and_grad(z_s, z_t, pair, cfg)[1]
