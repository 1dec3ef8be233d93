"""Hotspot-centred anchor boxes and the constrained density argmax.

Grid conventions: maps are ``[V, U]`` arrays indexed ``[v, u]`` (row,
column); boxes carry inclusive 0-based cell bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, EmptyInstance, InvalidRatio
from .respmap import ResponseMap

EPS_MASS = 1e-12
# absorbs round-off when the weighted mean lands on an integer
FLOOR_SLACK = 1e-9
# densities closer than this are treated as tied
TIE_TOL = 1e-12


@dataclass(frozen=True)
class Centroid:
    u: int
    v: int
    degenerate: bool = False


@dataclass(frozen=True)
class AnchorBox:
    left: int
    top: int
    right: int
    bottom: int

    @property
    def width(self) -> int:
        return self.right - self.left + 1

    @property
    def height(self) -> int:
        return self.bottom - self.top + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def contains(self, u: int, v: int) -> bool:
        return self.left <= u <= self.right and self.top <= v <= self.bottom

    def to_list(self) -> list[int]:
        return [self.left, self.top, self.right, self.bottom]


@dataclass(frozen=True)
class BoxFamily:
    center: Centroid
    col_spans: tuple[tuple[int, int], ...]
    row_spans: tuple[tuple[int, int], ...]

    @property
    def widths(self) -> list[int]:
        return [r - l + 1 for l, r in self.col_spans]

    @property
    def heights(self) -> list[int]:
        return [b - t + 1 for t, b in self.row_spans]

    @property
    def boxes(self) -> list[AnchorBox]:
        return [
            AnchorBox(l, t, r, b) for (t, b) in self.row_spans for (l, r) in self.col_spans
        ]

    def __len__(self) -> int:
        return len(self.col_spans) * len(self.row_spans)


@dataclass(frozen=True)
class SelectionResult:
    box: AnchorBox
    density: float
    area_ratio: float
    min_area_ratio: float
    centroid: Centroid
    grid_u: int
    grid_v: int

    @property
    def degenerate(self) -> bool:
        return self.centroid.degenerate

    def to_dict(self) -> dict:
        return {
            "box": self.box.to_list(),
            "density": self.density,
            "area_ratio": self.area_ratio,
            "centroid": [self.centroid.u, self.centroid.v],
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True)
class RedundancyRate:
    r: float
    per_image_areas: tuple[int, ...]
    per_image_cells: tuple[int, ...]
    mixed_sizes: bool = False

    def recompute(self) -> float:
        return 1.0 - sum(self.per_image_areas) / sum(self.per_image_cells)

    @property
    def retained_fraction(self) -> float:
        return sum(self.per_image_areas) / sum(self.per_image_cells)

    def to_dict(self) -> dict:
        return {
            "redundancy_rate": self.r,
            "per_image_areas": list(self.per_image_areas),
            "per_image_cells": list(self.per_image_cells),
            "mixed_sizes": self.mixed_sizes,
        }


def _as_map(rmap) -> np.ndarray:
    if isinstance(rmap, ResponseMap):
        return rmap.rectified
    m = np.asarray(rmap, dtype=np.float64)
    if m.ndim != 2:
        raise DimMismatch(f"response map must be 2-D [V, U], got shape {m.shape}")
    return m


def centroid(rmap) -> Centroid:
    """Floor of the mass-weighted mean (u, v) of a non-negative map.

    A map with no mass falls back to the grid centre and is flagged.
    """
    m = _as_map(rmap)
    v_n, u_n = m.shape
    mass = m.sum()
    if mass < EPS_MASS:
        return Centroid((u_n - 1) // 2, (v_n - 1) // 2, degenerate=True)
    mu = (m.sum(axis=0) @ np.arange(u_n)) / mass
    mv = (m.sum(axis=1) @ np.arange(v_n)) / mass
    u_c = min(max(int(math.floor(mu + FLOOR_SLACK)), 0), u_n - 1)
    v_c = min(max(int(math.floor(mv + FLOOR_SLACK)), 0), v_n - 1)
    return Centroid(u_c, v_c)


def _spans(c: int, n: int) -> tuple[tuple[int, int], ...]:
    # margin on the far side is n-1-c so the widest span is exactly the grid
    far = n - 1 - c
    return tuple((c - min(j, c), c + min(j, far)) for j in range(max(c, far) + 1))


def enumerate_boxes(center: Centroid, U: int, V: int) -> BoxFamily:
    if not (0 <= center.u < U and 0 <= center.v < V):
        raise DimMismatch(f"centre ({center.u}, {center.v}) outside a {U}x{V} grid")
    return BoxFamily(center=center, col_spans=_spans(center.u, U), row_spans=_spans(center.v, V))


class SummedAreaTable:
    """Inclusive prefix sums with a zero border for 4-lookup rectangle sums."""

    def __init__(self, rmap):
        m = _as_map(rmap)
        self._padded = np.zeros((m.shape[0] + 1, m.shape[1] + 1), dtype=np.float64)
        np.cumsum(np.cumsum(m, axis=0), axis=1, out=self._padded[1:, 1:])
        self._padded.setflags(write=False)

    @property
    def table(self) -> np.ndarray:
        return self._padded[1:, 1:]

    @property
    def shape(self) -> tuple[int, int]:
        """(U, V)."""
        v, u = self.table.shape
        return u, v

    def rect_sum(self, left, top, right, bottom):
        """Sum over inclusive bounds; arguments may be broadcastable arrays."""
        p = self._padded
        return p[bottom + 1, right + 1] - p[top, right + 1] - p[bottom + 1, left] + p[top, left]

    def box_sum(self, box: AnchorBox) -> float:
        return float(self.rect_sum(box.left, box.top, box.right, box.bottom))


def summed_area_table(rmap) -> SummedAreaTable:
    return SummedAreaTable(rmap)


def density(sat: SummedAreaTable, box: AnchorBox) -> float:
    """Mean map value inside ``box``."""
    U, V = sat.shape
    if not (0 <= box.left <= box.right < U and 0 <= box.top <= box.bottom < V):
        raise DimMismatch(f"box {box.to_list()} outside a {U}x{V} grid")
    return sat.box_sum(box) / box.area


def check_ratio(R: float) -> float:
    R = float(R)
    if not (0.0 < R <= 1.0):
        raise InvalidRatio(f"minimum area ratio must lie in (0, 1], got {R}")
    return R


def pick_best(densities, areas, widths) -> int:
    """Index of the max density; ties go to smaller area, then smaller width."""
    densities = np.asarray(densities, dtype=np.float64)
    best = densities.max()
    tied = np.flatnonzero(densities >= best - TIE_TOL)
    key = np.lexsort((np.asarray(widths)[tied], np.asarray(areas)[tied]))
    return int(tied[key[0]])


def select_optimal(rmap, R: float = 0.5) -> SelectionResult:
    """Highest-density box of the centred family covering at least ``R`` of the grid."""
    R = check_ratio(R)
    m = _as_map(rmap)
    V, U = m.shape
    total = U * V
    c = centroid(m)
    if c.degenerate:
        full = AnchorBox(0, 0, U - 1, V - 1)
        return SelectionResult(full, float(m.mean()), 1.0, R, c, U, V)

    fam = enumerate_boxes(c, U, V)
    sat = SummedAreaTable(m)
    cols = np.array(fam.col_spans)  # [J, 2]
    rows = np.array(fam.row_spans)  # [Kr, 2]
    # grid over (row span, col span)
    l, r = cols[None, :, 0], cols[None, :, 1]
    t, b = rows[:, None, 0], rows[:, None, 1]
    widths = np.broadcast_to(r - l + 1, (len(rows), len(cols)))
    heights = np.broadcast_to(b - t + 1, (len(rows), len(cols)))
    areas = widths * heights
    ok = (areas / total) >= R
    sums = sat.rect_sum(l, t, r, b)
    dens = sums / areas
    idx = pick_best(dens[ok], areas[ok], widths[ok])
    ki, ji = np.argwhere(ok)[idx]
    box = AnchorBox(int(cols[ji, 0]), int(rows[ki, 0]), int(cols[ji, 1]), int(rows[ki, 1]))
    return SelectionResult(box, float(dens[ki, ji]), box.area / total, R, c, U, V)


def crop_tokens(grid, box: AnchorBox) -> np.ndarray:
    """Sub-grid ``[h, w, D]`` of a ``[V, U, D]`` token grid, copied exactly."""
    g = np.asarray(grid)
    V, U = g.shape[:2]
    if not (0 <= box.left <= box.right < U and 0 <= box.top <= box.bottom < V):
        raise DimMismatch(f"box {box.to_list()} outside a {U}x{V} grid")
    return g[box.top : box.bottom + 1, box.left : box.right + 1].copy()


def redundancy_rate(selections, U: int | None = None, V: int | None = None) -> RedundancyRate:
    """Fraction of visual tokens discarded across an instance's images.

    ``selections`` are :class:`SelectionResult` (carrying their grid size) or
    bare :class:`AnchorBox` objects, which need ``U`` and ``V``. Images of
    different sizes use the summed cell count as denominator and set
    ``mixed_sizes``.
    """
    selections = list(selections)
    if not selections:
        raise EmptyInstance("redundancy rate needs at least one image")
    areas, cells = [], []
    for s in selections:
        if isinstance(s, SelectionResult):
            areas.append(s.box.area)
            cells.append(s.grid_u * s.grid_v)
        else:
            if U is None or V is None:
                raise DimMismatch("bare boxes need the grid size U, V")
            areas.append(s.area)
            cells.append(U * V)
    mixed = len(set(cells)) > 1
    if U is not None and V is not None and not mixed and cells[0] != U * V:
        raise DimMismatch(f"selections come from {cells[0]}-cell grids, not {U}x{V}")
    r = 1.0 - sum(areas) / sum(cells)
    return RedundancyRate(r=r, per_image_areas=tuple(areas), per_image_cells=tuple(cells), mixed_sizes=mixed)
