"""System description, polyhedral cells and lifted coordinates.

The plant is

    x[k+1] = f(x[k]) + B1 u[k] + D1 w[k]
    z[k]   = h(x[k]) + B2 u[k] + D2 w[k]

with ``f``, ``h`` given componentwise as expressions.  The state space region
of interest is split into polyhedral cells ``{x : E x + e >= 0}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import expr as ex

__all__ = [
    "NonlinearSystem", "Cell", "PolyhedralPartition", "OutOfRegionError",
    "grid_partition", "locate", "lift",
]

LOCATE_TOL = 1e-12


class OutOfRegionError(ValueError):
    """A point lies outside every cell of the partition."""


def _matrix(value, rows: int, cols: int, name: str) -> np.ndarray:
    a = np.atleast_2d(np.asarray(value, dtype=float))
    if a.size == rows * cols and a.shape != (rows, cols):
        # accept flat or column lists for vectors and scalars
        if 1 in a.shape or a.size == 1:
            a = a.reshape(rows, cols)
    if a.shape != (rows, cols):
        raise ValueError(f"{name} must have shape {(rows, cols)}, got {a.shape}")
    return a


def lift(x) -> np.ndarray:
    """Return the lifted vector ``[x; 1]`` (last axis for batches)."""
    x = np.asarray(x, dtype=float)
    ones = np.ones(x.shape[:-1] + (1,))
    return np.concatenate([x, ones], axis=-1)


@dataclass(frozen=True)
class NonlinearSystem:
    """Discrete-time plant with smooth ``f``, ``h`` and constant input maps."""

    f: tuple
    h: tuple
    B1: np.ndarray
    D1: np.ndarray
    B2: np.ndarray
    D2: np.ndarray
    f_source: tuple = field(default=(), compare=False)
    h_source: tuple = field(default=(), compare=False)

    def __post_init__(self):
        n, s = len(self.f), len(self.h)
        if n == 0 or s == 0:
            raise ValueError("f and h need at least one component each")
        m = np.atleast_2d(np.asarray(self.B1, dtype=float)).size // n
        object.__setattr__(self, "B1", _matrix(self.B1, n, m, "B1"))
        object.__setattr__(self, "D1", _matrix(self.D1, n, s, "D1"))
        object.__setattr__(self, "B2", _matrix(self.B2, s, m, "B2"))
        object.__setattr__(self, "D2", _matrix(self.D2, s, s, "D2"))
        for k, e in enumerate(self.f + self.h):
            bad = [v for v in ex.variables(e) if not _is_state(v, n)]
            if bad:
                raise ValueError(f"component {k} references unknown variables {bad}")
        zero = np.zeros(n)
        f0 = np.array([ex.evaluate(e, zero) for e in self.f])
        h0 = np.array([ex.evaluate(e, zero) for e in self.h])
        if np.max(np.abs(f0)) > 1e-12 or np.max(np.abs(h0)) > 1e-12:
            raise ValueError("f(0) and h(0) must vanish (within 1e-12)")

    @classmethod
    def from_strings(cls, f: Sequence[str], h: Sequence[str], B1, D1, B2, D2):
        n = len(f)
        fe = tuple(ex.parse(s, n=n) for s in f)
        he = tuple(ex.parse(s, n=n) for s in h)
        return cls(fe, he, B1, D1, B2, D2, tuple(f), tuple(h))

    @property
    def n(self) -> int:
        return len(self.f)

    @property
    def s(self) -> int:
        return len(self.h)

    @property
    def m(self) -> int:
        return self.B1.shape[1]

    def eval_f(self, x) -> np.ndarray:
        """``f(x)`` for a point ``(n,)`` or a batch ``(N, n)``."""
        return np.stack([np.broadcast_to(ex.evaluate(e, x), np.shape(x)[:-1])
                         for e in self.f], axis=-1)

    def eval_h(self, x) -> np.ndarray:
        return np.stack([np.broadcast_to(ex.evaluate(e, x), np.shape(x)[:-1])
                         for e in self.h], axis=-1)

    def step(self, x, u, w):
        """One step of the true dynamics; returns ``(x_next, z)``."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float).reshape(self.m)
        w = np.asarray(w, dtype=float).reshape(self.s)
        x_next = self.eval_f(x) + self.B1 @ u + self.D1 @ w
        z = self.eval_h(x) + self.B2 @ u + self.D2 @ w
        return x_next, z


def _is_state(name: str, n: int) -> bool:
    return name.startswith("x") and name[1:].isdigit() and 1 <= int(name[1:]) <= n


@dataclass(frozen=True)
class Cell:
    """Polyhedral cell ``{x : E x + e >= 0}``.

    ``axis`` and ``interval`` are set for slab cells built by
    :func:`grid_partition` and speed up sampling.  A cell is an origin cell
    when the origin satisfies every row, i.e. ``e >= 0``.  For such cells the
    analysis uses only the rows through the origin (``cone_rows``), which
    carry ``e = 0`` exactly; the remaining rows only serve point location.
    """

    index: int
    E: np.ndarray
    e: np.ndarray
    axis: int | None = None
    interval: tuple | None = None

    def __post_init__(self):
        E = np.atleast_2d(np.asarray(self.E, dtype=float))
        e = np.asarray(self.e, dtype=float).reshape(-1)
        if E.shape[0] != e.shape[0]:
            raise ValueError("E and e row counts differ")
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "e", e)

    @property
    def n(self) -> int:
        return self.E.shape[1]

    @property
    def contains_origin(self) -> bool:
        return bool(np.all(self.e >= 0))

    @property
    def E_bar(self) -> np.ndarray:
        """``[E e]`` acting on the lifted state."""
        return np.hstack([self.E, self.e[:, None]])

    @property
    def cone_rows(self) -> np.ndarray:
        """Rows of ``E`` whose offset is exactly zero."""
        return self.E[self.e == 0]

    @property
    def sprocedure_rows(self) -> np.ndarray:
        """Lifted rows used in cell-restricted inequalities.

        Origin cells keep only the rows through the origin, so the lifted
        offset column is exactly zero; other cells use all of ``[E e]``.
        """
        if self.contains_origin:
            rows = self.cone_rows
            return np.hstack([rows, np.zeros((rows.shape[0], 1))])
        return self.E_bar

    def contains(self, x, tol: float = LOCATE_TOL):
        x = np.asarray(x, dtype=float)
        return np.all(x @ self.E.T + self.e >= -tol, axis=-1)


@dataclass(frozen=True)
class PolyhedralPartition:
    """Ordered cells plus the bounding box ``lo <= x <= hi`` of the region."""

    cells: tuple
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        if self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
            raise ValueError("invalid bounding box")
        for k, c in enumerate(self.cells):
            if c.index != k:
                raise ValueError("cell indices must be 0..N-1 in order")
            if c.n != self.n:
                raise ValueError("cell dimension does not match the box")

    @property
    def n(self) -> int:
        return self.lo.shape[0]

    def __len__(self) -> int:
        return len(self.cells)

    def __getitem__(self, i) -> Cell:
        return self.cells[i]

    @property
    def origin_cells(self) -> list[int]:
        return [c.index for c in self.cells if c.contains_origin]

    def in_box(self, x, tol: float = LOCATE_TOL):
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def locate(self, x) -> int:
        return locate(self, x)

    def membership(self, x) -> np.ndarray:
        """Boolean matrix ``(N_points, N_cells)`` of cell membership."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.stack([c.contains(x) for c in self.cells], axis=1)

    def sample_box(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(count, self.n))

    def sample_cell(self, i: int, count: int, rng: np.random.Generator,
                    max_rounds: int = 50) -> np.ndarray:
        """Uniform samples from cell ``i`` intersected with the box."""
        cell = self.cells[i]
        lo, hi = self.lo.copy(), self.hi.copy()
        if cell.axis is not None:
            lo[cell.axis] = max(lo[cell.axis], cell.interval[0])
            hi[cell.axis] = min(hi[cell.axis], cell.interval[1])
        out = []
        got = 0
        for _ in range(max_rounds):
            pts = rng.uniform(lo, hi, size=(count, self.n))
            pts = pts[cell.contains(pts, tol=0.0)]
            out.append(pts)
            got += len(pts)
            if got >= count:
                break
        pts = np.concatenate(out)[:count]
        if len(pts) == 0:
            raise ValueError(f"cell {i} has no sample points inside the box")
        return pts

    def check_coverage(self, samples: int = 10_000, seed: int = 0) -> dict:
        """Sampled coverage and overlap statistics over the box."""
        rng = np.random.default_rng(seed)
        pts = self.sample_box(samples, rng)
        counts = self.membership(pts).sum(axis=1)
        return {"uncovered": int(np.sum(counts == 0)),
                "overlapping": int(np.sum(counts > 1)),
                "samples": samples}

    def bisect(self, indices: Iterable[int]) -> tuple["PolyhedralPartition", dict]:
        """Split the listed slab cells at their midpoints.

        Returns the new partition and a map from new cell index to the index
        of the parent cell in this partition.
        """
        split = set(indices)
        new_cells, parent = [], {}
        for c in self.cells:
            if c.index not in split:
                pieces = [(c.E, c.e, c.axis, c.interval)]
            else:
                if c.axis is None:
                    raise ValueError(f"cell {c.index} is not a slab and cannot be bisected")
                a, b = c.interval
                mid = 0.5 * (a + b)
                pieces = [_slab(self.n, c.axis, a, mid), _slab(self.n, c.axis, mid, b)]
            for E, e, axis, interval in pieces:
                parent[len(new_cells)] = c.index
                new_cells.append(Cell(len(new_cells), E, e, axis, interval))
        return PolyhedralPartition(tuple(new_cells), self.lo, self.hi), parent

    def describe(self, i: int) -> str:
        c = self.cells[i]
        if c.axis is not None:
            a, b = c.interval
            return f"cell {i}: {a:g} <= x{c.axis + 1} <= {b:g}"
        return f"cell {i}"


def _slab(n: int, axis: int, a: float, b: float):
    """Rows ``x[axis] - a >= 0`` and ``b - x[axis] >= 0``.

    Offsets at a zero endpoint are stored as an exact 0.0.
    """
    E = np.zeros((2, n))
    E[0, axis] = 1.0
    E[1, axis] = -1.0
    e = np.array([0.0 if a == 0 else -float(a), 0.0 if b == 0 else float(b)])
    return E, e, axis, (float(a), float(b))


def grid_partition(axis: int, breakpoints: Sequence[float], lo, hi) -> PolyhedralPartition:
    """Slab partition along ``axis`` (0-based) between consecutive breakpoints.

    ``lo``/``hi`` bound the other coordinates; along ``axis`` the box is taken
    from the first and last breakpoint.  If the slabs straddle the origin
    without 0 being a breakpoint, 0 is inserted so that origin cells are cones
    on the origin side.
    """
    bp = [float(b) for b in breakpoints]
    if len(bp) < 2:
        raise ValueError("need at least two breakpoints")
    if any(b2 <= b1 for b1, b2 in zip(bp, bp[1:])):
        raise ValueError("breakpoints must be strictly increasing")
    if bp[0] < 0 < bp[-1] and 0.0 not in bp:
        bp = sorted(bp + [0.0])
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    if not 0 <= axis < lo.shape[0]:
        raise ValueError("axis out of range")
    lo[axis], hi[axis] = bp[0], bp[-1]
    cells = []
    for a, b in zip(bp, bp[1:]):
        E, e, ax, interval = _slab(lo.shape[0], axis, a, b)
        cells.append(Cell(len(cells), E, e, ax, interval))
    return PolyhedralPartition(tuple(cells), lo, hi)


def locate(p: PolyhedralPartition, x) -> int:
    """Smallest cell index whose inequalities hold at ``x`` (tolerance 1e-12)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (p.n,):
        raise ValueError(f"expected a point of dimension {p.n}")
    if not np.all(np.isfinite(x)) or not p.in_box(x):
        raise OutOfRegionError(f"{x} lies outside the region")
    for c in p.cells:
        if np.all(c.E @ x + c.e >= -LOCATE_TOL):
            return c.index
    raise OutOfRegionError(f"{x} lies in no cell")
