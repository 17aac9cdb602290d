"""Delay space: node positions, coordinate files and the ground-truth delay metric.

Positions live in a low-dimensional Euclidean space whose distances are
read as one-way latency in milliseconds. The same metric drives message
latency in the simulator and the accuracy oracles in the experiments.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

RNG_NAME = "numpy.random.PCG64"

DelayPoint = tuple  # tuple[float, ...]


class CoordinateFileError(ValueError):
    """Malformed coordinate file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise DimensionError("box bounds differ in dimension")
        for a, b in zip(self.lo, self.hi):
            if not a < b:
                raise ValueError(f"degenerate box axis: min={a} max={b}")

    @classmethod
    def square(cls, lo: float, hi: float, dim: int = 2) -> "BoundingBox":
        return cls((float(lo),) * dim, (float(hi),) * dim)

    @property
    def dim(self) -> int:
        return len(self.lo)

    def contains(self, p: Sequence[float]) -> bool:
        return all(a <= x <= b for x, a, b in zip(p, self.lo, self.hi))


DEFAULT_BOX = BoundingBox.square(-100.0, 100.0)


def make_rng(seed: int, stream: str | None = None) -> np.random.Generator:
    """PCG64 generator for ``seed``; named streams are independent of each other."""
    if stream is None:
        return np.random.Generator(np.random.PCG64(seed))
    key = zlib.crc32(stream.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, key])))


def generate_uniform(n: int, box: BoundingBox, seed: int) -> list[DelayPoint]:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed)
    lo = np.asarray(box.lo)
    hi = np.asarray(box.hi)
    pts = lo + (hi - lo) * rng.random((n, box.dim))
    return [tuple(float(v) for v in row) for row in pts]


def _check_point(p: Sequence[float], line: int | None = None) -> None:
    if not all(math.isfinite(v) for v in p):
        raise CoordinateFileError("non-finite coordinate", line)


def load_coordinates(path: str | Path) -> list[DelayPoint]:
    """Read a coordinate file: one ``<id> <x1> ... <xd>`` record per line.

    Blank lines and lines starting with ``#`` are skipped. Ids must be
    unique non-negative integers; record order is preserved.
    """
    points: list[DelayPoint] = []
    seen: set[int] = set()
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split()
            if len(fields) < 2:
                raise CoordinateFileError("expected an id and at least one coordinate", lineno)
            try:
                ident = int(fields[0])
                coords = tuple(float(v) for v in fields[1:])
            except ValueError as exc:
                raise CoordinateFileError(f"unparseable token ({exc})", lineno) from None
            if ident < 0:
                raise CoordinateFileError(f"negative id {ident}", lineno)
            if ident in seen:
                raise CoordinateFileError(f"duplicate id {ident}", lineno)
            _check_point(coords, lineno)
            if dim is None:
                dim = len(coords)
            elif len(coords) != dim:
                raise DimensionError(
                    f"line {lineno}: dimension {len(coords)} differs from {dim}"
                )
            seen.add(ident)
            points.append(coords)
    return points


def write_coordinates(points: Iterable[Sequence[float]], path: str | Path,
                      header: Sequence[str] = ()) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        for i, p in enumerate(points):
            fh.write(f"{i} " + " ".join(repr(float(v)) for v in p) + "\n")


def delay(a: Sequence[float], b: Sequence[float]) -> float:
    if len(a) != len(b):
        raise DimensionError(f"dimension mismatch: {len(a)} vs {len(b)}")
    return math.dist(a, b)


def average_pairwise_delay(points: Sequence[Sequence[float]]) -> float:
    """Mean delay over all unordered pairs of distinct points."""
    n = len(points)
    if n < 2:
        raise ValueError("need at least two points")
    arr = np.asarray(points, dtype=float)
    total = 0.0
    # row blocks keep memory at O(block * n) for large inputs
    block = 512
    for start in range(0, n - 1, block):
        rows = arr[start:start + block]
        d = np.sqrt(((rows[:, None, :] - arr[None, :, :]) ** 2).sum(axis=2))
        idx = np.arange(start, start + len(rows))
        mask = np.arange(n)[None, :] > idx[:, None]
        total += float(d[mask].sum())
    return total / (n * (n - 1) / 2)
