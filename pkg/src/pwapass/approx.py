"""Per-cell affine approximation with sampled residual bounds.

On each cell the maps are replaced by ``A x + a`` and ``C x + c`` with

    ||f(x) - A x - a|| <= eps ||x||,    ||h(x) - C x - c|| <= delta ||x||

where ``eps`` and ``delta`` come from uniform sampling times a safety factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from . import expr as ex
from .model import NonlinearSystem, PolyhedralPartition, locate

__all__ = [
    "PwaCellApproximation", "PwaApproximation", "symbolic_jacobian",
    "expansion_point", "linearize_cell", "bound_residuals", "residual",
    "approximate", "SAFETY_FACTOR", "DEFAULT_SAMPLES",
]

SAFETY_FACTOR = 1.2
DEFAULT_SAMPLES = 10_000


@dataclass(frozen=True)
class PwaCellApproximation:
    index: int
    A: np.ndarray
    a: np.ndarray
    C: np.ndarray
    c: np.ndarray
    eps: float = 0.0
    delta: float = 0.0
    center: np.ndarray | None = None
    f_affine: tuple = ()   # components of f with an exact affine form
    h_affine: tuple = ()

    @property
    def A_hat(self) -> np.ndarray:
        """``[[A, a], [0, 1]]``."""
        n = self.A.shape[0]
        top = np.hstack([self.A, self.a[:, None]])
        bottom = np.zeros((1, n + 1))
        bottom[0, n] = 1.0
        return np.vstack([top, bottom])

    @property
    def A_bar(self) -> np.ndarray:
        """``[A a]``."""
        return np.hstack([self.A, self.a[:, None]])

    @property
    def C_bar(self) -> np.ndarray:
        """``[C c]``."""
        return np.hstack([self.C, self.c[:, None]])


@dataclass(frozen=True)
class PwaApproximation:
    """One affine piece per partition cell plus the constant input maps."""

    partition: PolyhedralPartition
    cells: tuple
    B1: np.ndarray
    D1: np.ndarray
    B2: np.ndarray
    D2: np.ndarray
    system: NonlinearSystem | None = field(default=None, compare=False)
    method: str = "taylor"

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        if len(self.cells) != len(self.partition):
            raise ValueError("one approximation per cell is required")
        for k, c in enumerate(self.cells):
            if c.index != k:
                raise ValueError("cell approximations must be ordered by index")

    @classmethod
    def from_affine(cls, partition, A, a, C, c, B1, D1, B2, D2):
        """A PWA system given directly, with zero residual bounds."""
        n = partition.n
        cells = []
        for i in range(len(partition)):
            Ai = np.asarray(A[i], dtype=float).reshape(n, n)
            Ci = np.atleast_2d(np.asarray(C[i], dtype=float))
            s = Ci.shape[0]
            cells.append(PwaCellApproximation(
                i, Ai, np.asarray(a[i], dtype=float).reshape(n),
                Ci.reshape(s, n), np.asarray(c[i], dtype=float).reshape(s)))
        B1 = np.atleast_2d(np.asarray(B1, dtype=float))
        if B1.shape[0] != n:
            B1 = B1.reshape(n, -1)
        s = cells[0].C.shape[0]
        return cls(partition, tuple(cells), B1,
                   np.asarray(D1, dtype=float).reshape(n, s),
                   np.asarray(B2, dtype=float).reshape(s, B1.shape[1]),
                   np.asarray(D2, dtype=float).reshape(s, s), None, "given")

    @property
    def n(self) -> int:
        return self.partition.n

    @property
    def m(self) -> int:
        return self.B1.shape[1]

    @property
    def s(self) -> int:
        return self.D2.shape[0]

    @property
    def B1_hat(self) -> np.ndarray:
        return np.vstack([self.B1, np.zeros((1, self.m))])

    @property
    def D1_hat(self) -> np.ndarray:
        return np.vstack([self.D1, np.zeros((1, self.s))])

    @property
    def eps(self) -> np.ndarray:
        return np.array([c.eps for c in self.cells])

    @property
    def delta(self) -> np.ndarray:
        return np.array([c.delta for c in self.cells])

    def __len__(self) -> int:
        return len(self.cells)

    def __getitem__(self, i) -> PwaCellApproximation:
        return self.cells[i]

    def with_zero_bounds(self) -> "PwaApproximation":
        """Same affine pieces with ``eps = delta = 0`` (a pure PWA system)."""
        cells = tuple(replace(c, eps=0.0, delta=0.0) for c in self.cells)
        return replace(self, cells=cells)

    def step(self, x, u, w):
        """One step of the PWA dynamics; returns ``(x_next, z)``."""
        x = np.asarray(x, dtype=float)
        c = self.cells[locate(self.partition, x)]
        u = np.asarray(u, dtype=float).reshape(self.m)
        w = np.asarray(w, dtype=float).reshape(self.s)
        return (c.A @ x + c.a + self.B1 @ u + self.D1 @ w,
                c.C @ x + c.c + self.B2 @ u + self.D2 @ w)


def symbolic_jacobian(components: Sequence[ex.Expression], n: int):
    """Folded symbolic Jacobian and a per-component flag for affine maps.

    A component is affine when all of its second derivatives fold to zero.
    """
    jac = [[ex.fold(ex.differentiate(e, k + 1)) for k in range(n)] for e in components]
    affine = []
    for row in jac:
        flat = True
        for d in row:
            for k in range(n):
                dd = ex.fold(ex.differentiate(d, k + 1))
                if not (isinstance(dd, ex.Const) and dd.value == 0):
                    flat = False
                    break
            if not flat:
                break
        affine.append(flat)
    return jac, tuple(affine)


def _eval_jacobian(jac, x) -> np.ndarray:
    return np.array([[ex.evaluate(d, x) for d in row] for row in jac], dtype=float)


def expansion_point(partition: PolyhedralPartition, i: int) -> np.ndarray:
    """Origin for origin cells, slab midpoint for slabs, else a Chebyshev centre."""
    cell = partition[i]
    n = partition.n
    if cell.contains_origin:
        return np.zeros(n)
    center = 0.5 * (partition.lo + partition.hi)
    if cell.axis is not None:
        a, b = cell.interval
        center[cell.axis] = 0.5 * (a + b)
        return center
    # maximise r subject to E x + e >= r ||E_k|| and the box
    norms = np.linalg.norm(cell.E, axis=1)
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-cell.E, norms[:, None]])
    res = linprog(c, A_ub=A_ub, b_ub=cell.e,
                  bounds=[(l, h) for l, h in zip(partition.lo, partition.hi)] + [(0, None)],
                  method="highs")
    if res.status != 0:
        raise ValueError(f"cell {i} appears to be empty")
    return res.x[:n]


def _affine_fit(components, affine, jac, x0) -> tuple[np.ndarray, np.ndarray]:
    """Taylor pieces ``(M, b)`` at ``x0``; affine components are exact."""
    M = _eval_jacobian(jac, x0)
    vals = np.array([ex.evaluate(e, x0) for e in components])
    b = vals - M @ x0
    zero = np.zeros_like(x0)
    for k, flat in enumerate(affine):
        if flat:
            b[k] = ex.evaluate(components[k], zero)
    return M, b


def _minimax_linear(values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Row ``g`` minimising max |v - g.x| / ||x|| over the sample points."""
    norms = np.linalg.norm(pts, axis=1)
    keep = norms > 0
    X = pts[keep] / norms[keep, None]
    v = values[keep] / norms[keep]
    n = pts.shape[1]
    c = np.zeros(n + 1)
    c[-1] = 1.0
    # v - X g <= t and X g - v <= t
    A_ub = np.vstack([np.hstack([-X, -np.ones((len(v), 1))]),
                      np.hstack([X, -np.ones((len(v), 1))])])
    b_ub = np.concatenate([-v, v])
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=[(None, None)] * n + [(0, None)],
                  method="highs")
    if res.status != 0:
        raise RuntimeError("minimax fit failed")
    return res.x[:n]


def linearize_cell(sys: NonlinearSystem, partition: PolyhedralPartition, i: int,
                   method: str = "taylor", seed: int = 0,
                   fit_samples: int = 2000) -> PwaCellApproximation:
    """Affine piece for cell ``i`` (bounds not yet computed).

    ``method="taylor"`` expands at :func:`expansion_point`.  ``method="secant"``
    fits a linear map through the origin (``a = c = 0`` in every cell) by a
    minimax fit of the residual ratio on sample points; components that are
    exactly affine keep their gradient.
    """
    n = sys.n
    jf, f_aff = symbolic_jacobian(sys.f, n)
    jh, h_aff = symbolic_jacobian(sys.h, n)
    x0 = expansion_point(partition, i)
    try:
        A, a = _affine_fit(sys.f, f_aff, jf, x0)
        C, c = _affine_fit(sys.h, h_aff, jh, x0)
    except ex.EvaluationError as err:
        raise ValueError(f"cannot linearize cell {i}: {err}") from err
    if method == "secant":
        rng = np.random.default_rng([seed, i, 7])
        pts = partition.sample_cell(i, fit_samples, rng)
        fx, hx = sys.eval_f(pts), sys.eval_h(pts)
        for k, flat in enumerate(f_aff):
            if not flat:
                A[k] = _minimax_linear(fx[:, k], pts)
        for k, flat in enumerate(h_aff):
            if not flat:
                C[k] = _minimax_linear(hx[:, k], pts)
        a = np.zeros(n)
        c = np.zeros(sys.s)
        for k, flat in enumerate(f_aff):
            if flat:
                a[k] = ex.evaluate(sys.f[k], np.zeros(n))
        for k, flat in enumerate(h_aff):
            if flat:
                c[k] = ex.evaluate(sys.h[k], np.zeros(n))
    elif method != "taylor":
        raise ValueError(f"unknown linearization method {method!r}")
    if partition[i].contains_origin:
        a = np.zeros(n)
        c = np.zeros(sys.s)
    return PwaCellApproximation(i, A, a, C, c, 0.0, 0.0, x0, f_aff, h_aff)


def residual(sys: NonlinearSystem, cell: PwaCellApproximation, x):
    """``(f(x) - A x - a, h(x) - C x - c)`` for a point or a batch.

    Components flagged as exactly affine contribute an exact zero.
    """
    x = np.asarray(x, dtype=float)
    m = sys.eval_f(x) - x @ cell.A.T - cell.a
    r = sys.eval_h(x) - x @ cell.C.T - cell.c
    if cell.f_affine:
        m[..., np.array(cell.f_affine, dtype=bool)] = 0.0
    if cell.h_affine:
        r[..., np.array(cell.h_affine, dtype=bool)] = 0.0
    return m, r


def bound_residuals(sys: NonlinearSystem, partition: PolyhedralPartition,
                    cell: PwaCellApproximation, samples: int = DEFAULT_SAMPLES,
                    seed: int = 0, safety: float = SAFETY_FACTOR,
                    return_raw: bool = False):
    """Sampled ``(eps, delta)``: safety factor times the largest residual ratio."""
    if samples < 1000:
        raise ValueError("at least 1000 samples are required")
    rng = np.random.default_rng([seed, cell.index])
    pts = partition.sample_cell(cell.index, samples, rng)
    norms = np.linalg.norm(pts, axis=1)
    pts, norms = pts[norms > 0], norms[norms > 0]
    if len(pts) == 0:
        raise ValueError(f"cell {cell.index} produced no usable samples")
    m, r = residual(sys, cell, pts)
    eps_raw = float(np.max(np.linalg.norm(m, axis=1) / norms))
    delta_raw = float(np.max(np.linalg.norm(r, axis=1) / norms))
    if return_raw:
        return eps_raw, delta_raw
    return safety * eps_raw, safety * delta_raw


def approximate(sys: NonlinearSystem, partition: PolyhedralPartition,
                method: str = "taylor", samples: int = DEFAULT_SAMPLES,
                seed: int = 0, safety: float = SAFETY_FACTOR) -> PwaApproximation:
    """Linearize every cell and attach sampled residual bounds."""
    if partition.n != sys.n:
        raise ValueError("partition dimension does not match the system")
    cells = []
    for i in range(len(partition)):
        c = linearize_cell(sys, partition, i, method=method, seed=seed)
        eps, delta = bound_residuals(sys, partition, c, samples, seed, safety)
        cells.append(replace(c, eps=eps, delta=delta))
    return PwaApproximation(partition, tuple(cells), sys.B1, sys.D1, sys.B2, sys.D2,
                            sys, method)
