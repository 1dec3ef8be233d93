"""Token-level response maps.

A response map scores every visual token of one image by its cosine
similarity to the mean-pooled text embedding associated with that image.
Scores are laid out as a ``[V, U]`` array: row ``v``, column ``u``, with
flat token index ``k = v * U + u``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, EmptyText, NonFinite

EPS_NORM = 1e-12
RECTIFY_MODES = ("relu", "shift")


def pool_text(text) -> np.ndarray:
    """Mean over the length axis of an ``[L, D]`` text embedding."""
    t = np.asarray(text, dtype=np.float64)
    if t.ndim == 1:
        t = t[None, :]
    if t.ndim != 2 or t.shape[0] == 0:
        raise EmptyText("text embedding has no rows")
    pooled = t.mean(axis=0)
    if not np.isfinite(pooled).all():
        raise NonFinite("pooled text embedding is not finite")
    return pooled


def cosine(a, b) -> float:
    """Cosine similarity; 0.0 if either vector is (numerically) zero.

    Use :func:`is_degenerate` to tell a true orthogonal 0 from the fallback.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"cosine of vectors with shapes {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < EPS_NORM or nb < EPS_NORM:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def is_degenerate(a, b) -> bool:
    return bool(
        np.linalg.norm(np.asarray(a, dtype=np.float64)) < EPS_NORM
        or np.linalg.norm(np.asarray(b, dtype=np.float64)) < EPS_NORM
    )


def cosine_rows(rows, vec) -> tuple[np.ndarray, np.ndarray]:
    """Cosine of every row of ``rows`` [K, D] against ``vec`` [D].

    Returns ``(scores, degenerate_mask)``; degenerate entries score 0.
    """
    rows = np.asarray(rows, dtype=np.float64)
    vec = np.asarray(vec, dtype=np.float64)
    if rows.shape[-1] != vec.shape[-1]:
        raise DimMismatch(f"token width {rows.shape[-1]} != text width {vec.shape[-1]}")
    rn = np.linalg.norm(rows, axis=-1)
    vn = np.linalg.norm(vec)
    bad = (rn < EPS_NORM) | (vn < EPS_NORM)
    denom = np.where(bad, 1.0, rn * vn)
    scores = np.where(bad, 0.0, (rows @ vec) / denom)
    return np.clip(scores, -1.0, 1.0), bad


@dataclass(frozen=True, eq=False)
class ResponseMap:
    scores: np.ndarray  # [V, U], raw cosine
    rectified: np.ndarray  # [V, U], >= 0
    source: str = "caption"
    mode: str = "relu"
    degenerate_cells: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        """(U, V) - columns, rows."""
        v, u = self.scores.shape
        return u, v

    def flat_scores(self) -> np.ndarray:
        return self.scores.reshape(-1)

    def summary(self) -> dict:
        s = self.scores
        return {
            "source": self.source,
            "rectify": self.mode,
            "min": float(s.min()),
            "max": float(s.max()),
            "mean": float(s.mean()),
            "zero_norm_tokens": int(self.degenerate_cells.sum())
            if self.degenerate_cells is not None
            else 0,
        }


def rectify_scores(scores, mode: str = "relu") -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if mode == "relu":
        return np.maximum(s, 0.0)
    if mode == "shift":
        return s - s.min()
    raise ValueError(f"unknown rectify mode {mode!r}; expected one of {RECTIFY_MODES}")


def rectify(rmap: ResponseMap, mode: str = "relu") -> ResponseMap:
    return ResponseMap(
        scores=rmap.scores,
        rectified=rectify_scores(rmap.scores, mode),
        source=rmap.source,
        mode=mode,
        degenerate_cells=rmap.degenerate_cells,
    )


def response_map(grid, pooled, *, source: str = "caption", mode: str = "relu") -> ResponseMap:
    """Cosine response of each token in ``grid`` ([V, U, D]) to ``pooled`` ([D])."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 3:
        raise DimMismatch(f"token grid must be [V, U, D], got shape {g.shape}")
    v, u, d = g.shape
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.shape != (d,):
        raise DimMismatch(f"grid width {d} != pooled text width {pooled.shape}")
    scores, bad = cosine_rows(g.reshape(v * u, d), pooled)
    scores = scores.reshape(v, u)
    return ResponseMap(
        scores=scores,
        rectified=rectify_scores(scores, mode),
        source=source,
        mode=mode,
        degenerate_cells=bad.reshape(v, u),
    )


def image_response_map(bundle, i: int, mode: str = "relu") -> ResponseMap:
    """Response map of image ``i`` using its caption, else the question."""
    img = bundle.images[i]
    return response_map(
        img.grid(), pool_text(bundle.text_for(i)), source=img.caption_source, mode=mode
    )
