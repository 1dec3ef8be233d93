"""Fixed-ratio top-k token retention by raw response score."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import IndexOutOfRange, InvalidRatio
from .respmap import ResponseMap


@dataclass(frozen=True, eq=False)
class RetentionResult:
    kept_indices: np.ndarray
    ratio: float
    total: int

    @property
    def kept_count(self) -> int:
        return int(self.kept_indices.size)

    def to_dict(self) -> dict:
        return {
            "kept_indices": [int(i) for i in self.kept_indices],
            "kept_count": self.kept_count,
            "ratio": self.ratio,
            "total": self.total,
        }


def kept_count(ratio: float, total: int) -> int:
    """``ceil(ratio * total)`` computed exactly on the ratio's shortest decimal form.

    Plain float products overshoot (``0.07 * 100 == 7.000000000000001``) and
    the float's binary value can too (``0.1`` is slightly above one tenth).
    """
    return math.ceil(Fraction(repr(float(ratio))) * total)


def topk_retention(rmap, ratio: float) -> RetentionResult:
    """Keep the highest raw-scoring ``ceil(ratio * K)`` tokens.

    Ties favour the lower token index; indices come back sorted.
    """
    ratio = float(ratio)
    if not (0.0 < ratio <= 1.0):
        raise InvalidRatio(f"retention ratio must lie in (0, 1], got {ratio}")
    scores = rmap.flat_scores() if isinstance(rmap, ResponseMap) else np.ravel(np.asarray(rmap, dtype=np.float64))
    k = kept_count(ratio, scores.size)
    # stable sort on -score keeps lower indices first among equal scores
    order = np.argsort(-scores, kind="stable")
    return RetentionResult(kept_indices=np.sort(order[:k]), ratio=ratio, total=int(scores.size))


def gather_tokens(tokens, result: RetentionResult) -> np.ndarray:
    """Rows of ``tokens`` ([K, D] or [V, U, D]) at the kept indices, in index order."""
    t = np.asarray(tokens)
    if t.ndim == 3:
        t = t.reshape(-1, t.shape[-1])
    idx = np.asarray(result.kept_indices)
    if idx.size and (idx.min() < 0 or idx.max() >= t.shape[0]):
        raise IndexOutOfRange(f"kept indices exceed token count {t.shape[0]}")
    return t[idx].copy()
