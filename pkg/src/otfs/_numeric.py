"""Small numeric helpers."""

from __future__ import annotations

import numpy as np


def logsumexp(x: np.ndarray, axis=None) -> np.ndarray:
    """``log(sum(exp(x)))`` along ``axis``, max-shifted; all ``-inf`` slices give ``-inf``.

    Callers are expected to silence divide-by-zero warnings themselves when
    ``-inf`` entries are possible.
    """
    m = x.max(axis=axis, keepdims=True)
    if not np.isfinite(m).all():
        m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    return out.squeeze(axis=axis) if axis is not None else out.reshape(())[()]
