"""Delay space to ring coordinate mapping.

A position is rescaled into the unit hypercube, quantised onto a
``2**order`` grid per axis and ranked along a space-filling curve; the rank
divided by the number of cells is the node's wrapping ring coordinate in
[0, 1).

Two curve kinds are available:

``moore`` (default, 2-D only)
    The closed variant of the Hilbert curve: four Hilbert sub-curves
    arranged so the last cell is edge-adjacent to the first. Because the
    ring coordinate wraps, a closed curve keeps the seam between rank
    ``4**p - 1`` and rank 0 spatially local.
``hilbert``
    Skilling's n-dimensional Hilbert curve. Its endpoints sit at opposite
    corners of one edge, so indices that are adjacent across the ring seam
    are far apart in space.

Cells are half-open per axis; a coordinate equal to the upper bound falls
into the last cell.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

from .delay_space import BoundingBox, DimensionError

CLOCKWISE = "cw"
ANTICLOCKWISE = "acw"


@dataclass(frozen=True)
class CurveParams:
    order: int = 16
    kind: str = "moore"

    def __post_init__(self):
        if not 1 <= self.order <= 30:
            raise ValueError(f"curve order must be in [1, 30], got {self.order}")
        if self.kind not in CURVES:
            raise ValueError(f"unknown curve kind {self.kind!r}; known: {sorted(CURVES)}")


def to_unit_square(p: Sequence[float], box: BoundingBox) -> tuple[float, ...]:
    if len(p) != box.dim:
        raise DimensionError(f"point has dimension {len(p)}, box has {box.dim}")
    out = []
    for x, lo, hi in zip(p, box.lo, box.hi):
        if not lo < hi:
            raise ValueError("degenerate bounding box")
        u = (x - lo) / (hi - lo)
        out.append(min(1.0, max(0.0, u)))
    return tuple(out)


def cell_of(u: Sequence[float], order: int) -> tuple[int, ...]:
    side = 1 << order
    return tuple(min(side - 1, int(v * side)) for v in u)


def hilbert_rank(cell: Sequence[int], order: int) -> int:
    """Rank of an integer grid cell on Skilling's Hilbert curve."""
    X = list(cell)
    n = len(X)
    Q = 1 << (order - 1)
    while Q > 1:
        P = Q - 1
        for i in range(n):
            if X[i] & Q:
                X[0] ^= P
            else:
                t = (X[0] ^ X[i]) & P
                X[0] ^= t
                X[i] ^= t
        Q >>= 1
    for i in range(1, n):
        X[i] ^= X[i - 1]
    t = 0
    Q = 1 << (order - 1)
    while Q > 1:
        if X[n - 1] & Q:
            t ^= Q - 1
        Q >>= 1
    rank = 0
    for bit in range(order - 1, -1, -1):
        for i in range(n):
            rank = (rank << 1) | (((X[i] ^ t) >> bit) & 1)
    return rank


def moore_rank(cell: Sequence[int], order: int) -> int:
    """Rank of a 2-D grid cell on the Moore curve.

    Quadrants are visited lower-left, upper-left, upper-right, lower-right.
    The curve starts at ``(h-1, 0)`` and ends next to it at ``(h, 0)`` where
    ``h = 2**(order-1)``.
    """
    if len(cell) != 2:
        raise DimensionError("the moore curve is defined for 2-D positions only")
    x, y = cell
    if order == 1:
        return (0, 1, 3, 2)[2 * x + y]
    h = 1 << (order - 1)
    if x < h:
        quadrant = 0 if y < h else 1
        ly = y - h * quadrant
        lx, ly = ly, h - 1 - x
    else:
        quadrant = 3 if y < h else 2
        ly = y - h * (quadrant == 2)
        lx, ly = h - 1 - ly, x - h
    return quadrant * h * h + hilbert_rank((lx, ly), order - 1)


CURVES: dict[str, Callable[[Sequence[int], int], int]] = {
    "moore": moore_rank,
    "hilbert": hilbert_rank,
}


def cell_rank(cell: Sequence[int], params: CurveParams) -> int:
    return CURVES[params.kind](cell, params.order)


def curve_index(u: Sequence[float], params: CurveParams) -> float:
    """Ring coordinate of a unit-square point: cell rank / cell count."""
    cell = cell_of(u, params.order)
    return cell_rank(cell, params) / float(1 << (params.order * len(cell)))


def ring_coord(p: Sequence[float], box: BoundingBox, params: CurveParams) -> float:
    return curve_index(to_unit_square(p, box), params)


def ring_distance(a: float, b: float) -> float:
    d = abs(a - b) % 1.0
    return min(d, 1.0 - d)


def ring_target(a: float, dist: float, direction: str) -> float:
    if not 0.0 < dist <= 0.5:
        raise ValueError(f"target distance must be in (0, 0.5], got {dist}")
    if direction == CLOCKWISE:
        t = a + dist
    elif direction == ANTICLOCKWISE:
        t = a - dist
    else:
        raise ValueError(f"unknown direction {direction!r}")
    t %= 1.0
    # a tiny negative value rounds up to exactly 1.0
    return 0.0 if t >= 1.0 else t
