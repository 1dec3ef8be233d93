"""Collaborative decoding: blend the global-input and key-region-input
next-token distributions with a redundancy-scheduled weight."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .anchor import RedundancyRate
from .errors import InvalidDistribution, InvalidRedundancy, NonFinite, ShapeMismatch

DIST_TOL = 1e-4


@dataclass(frozen=True)
class FusionConfig:
    lam: float = 5.0
    beta_override: float | None = None
    # weight the global distribution by beta instead of the key-region one
    swap_weights: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.beta_override is not None and not (0.0 <= self.beta_override <= 1.0):
            raise ValueError(f"beta override must lie in [0, 1], got {self.beta_override}")


def _r_value(r) -> float:
    return float(r.r if isinstance(r, RedundancyRate) else r)


def beta(config: FusionConfig, r) -> float:
    """``exp(-lambda * r)``, or the configured override."""
    rv = _r_value(r)
    if not (0.0 <= rv <= 1.0):
        raise InvalidRedundancy(f"redundancy rate must lie in [0, 1], got {rv}")
    if config.beta_override is not None:
        return float(config.beta_override)
    return math.exp(-config.lam * rv)


def check_distribution(p, name: str = "distribution") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidDistribution(f"{name} must be a non-empty vector")
    if not np.isfinite(p).all():
        raise InvalidDistribution(f"{name} has non-finite entries")
    if (p < 0).any():
        raise InvalidDistribution(f"{name} has negative entries")
    if abs(p.sum() - 1.0) > DIST_TOL:
        raise InvalidDistribution(f"{name} sums to {p.sum():.6g}, not 1")
    return p


def fuse(p_o, p_b, beta: float, swap_weights: bool = False) -> np.ndarray:
    """``(1 - beta) * p_o + beta * p_b`` (roles exchanged when ``swap_weights``)."""
    p_o = check_distribution(p_o, "P_o")
    p_b = check_distribution(p_b, "P_b")
    if p_o.shape != p_b.shape:
        raise ShapeMismatch(f"vocabulary sizes differ: {p_o.size} vs {p_b.size}")
    if not (0.0 <= beta <= 1.0):
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if swap_weights:
        p_o, p_b = p_b, p_o
    return (1.0 - beta) * p_o + beta * p_b


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax of a ``[T, vocab]`` array (max-subtracted)."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if not np.isfinite(x).all():
        raise NonFinite("logits contain NaN or Inf")
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class FusedStream:
    probs: np.ndarray  # [T, vocab]
    argmax: np.ndarray  # [T]
    beta: float
    redundancy_rate: float

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "redundancy_rate": self.redundancy_rate,
            "steps": [
                {"argmax": int(a), "probs": p.tolist()} for p, a in zip(self.probs, self.argmax)
            ],
            "argmax": [int(a) for a in self.argmax],
        }


def fuse_stream(global_logits, compressed_logits, config: FusionConfig, r) -> FusedStream:
    """Fuse two logit streams step by step with one instance-level beta."""
    g = np.asarray(global_logits, dtype=np.float64)
    c = np.asarray(compressed_logits, dtype=np.float64)
    if g.ndim != 2 or g.shape != c.shape:
        raise ShapeMismatch(f"logit streams must share [T, vocab]: {g.shape} vs {c.shape}")
    b = beta(config, r)
    p_o, p_b = softmax_rows(g), softmax_rows(c)
    fused = np.stack([fuse(po, pb, b, config.swap_weights) for po, pb in zip(p_o, p_b)])
    return FusedStream(probs=fused, argmax=fused.argmax(axis=1), beta=b, redundancy_rate=_r_value(r))
