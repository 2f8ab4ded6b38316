"""Block linear matrix inequalities and a margin-maximising feasibility solve.

A constraint is a callable ``build(v, bmat)`` that assembles a square block
matrix from the variable values in ``v`` using ``bmat`` to join blocks.  The
same callable is evaluated with numpy (``np.block``) for replay and with cvxpy
(``cp.bmat``) for solving, so the matrix that is checked is exactly the
matrix that was solved for.

The solve maximises a common slack ``t`` (capped) over all soft constraints;
the verdict always comes from an independent eigenvalue replay of the
returned assignment, never from the solver status alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import cvxpy as cp
import numpy as np

__all__ = [
    "MatrixVariable", "LmiConstraint", "LmiProblem", "LmiSolution",
    "solve_feasibility", "spectral_norm", "min_eigenvalue", "schur_psd_check",
    "FEASIBLE", "INFEASIBLE", "INCONCLUSIVE",
]

log = logging.getLogger(__name__)

FEASIBLE = "feasible"
INFEASIBLE = "infeasible"
INCONCLUSIVE = "inconclusive"

_SENSES = {">=": (1.0, False), ">": (1.0, True), "<=": (-1.0, False), "<": (-1.0, True)}


# ---------------------------------------------------------------- utilities


def spectral_norm(M) -> float:
    """Largest singular value."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0.0
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    return float(np.linalg.norm(M, 2))


def _is_symmetric(S: np.ndarray, rtol: float = 1e-12) -> bool:
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    return bool(np.max(np.abs(S - S.T), initial=0.0) <= rtol * scale)


def min_eigenvalue(S) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1]:
        raise ValueError("matrix is not square")
    if S.size == 0:
        return np.inf
    if not _is_symmetric(S):
        raise ValueError("matrix is not symmetric")
    return float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])


def schur_psd_check(A, B, C, tol: float = 1e-10) -> bool:
    """Decide ``[[A, B], [B^T, C]] >= 0`` with ``C > 0`` by two routes.

    The complement route tests ``A - B C^-1 B^T >= 0``; the block route tests
    the full matrix.  Both are computed and must agree.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if min_eigenvalue(C) <= 0:
        raise ValueError("C must be positive definite")
    full = np.block([[A, B], [B.T, C]])
    scale = max(1.0, spectral_norm(full))
    comp = A - B @ np.linalg.solve(C, B.T)
    by_complement = min_eigenvalue(0.5 * (comp + comp.T)) >= -tol * scale
    by_block = min_eigenvalue(full) >= -tol * scale
    if by_complement != by_block:
        raise ArithmeticError("Schur complement and block routes disagree")
    return by_block


# ---------------------------------------------------------------- problem


@dataclass(frozen=True)
class MatrixVariable:
    """Decision matrix with optional structure.

    ``positive`` forces every entry to be at least ``eta_pos``; ``zero_mask``
    marks entries fixed at zero.
    """

    name: str
    shape: tuple
    symmetric: bool = False
    positive: bool = False
    zero_mask: np.ndarray | None = None

    @property
    def scalars(self) -> int:
        r, c = self.shape
        free = r * (r + 1) // 2 if self.symmetric else r * c
        if self.zero_mask is not None:
            mask = np.triu(self.zero_mask) if self.symmetric else self.zero_mask
            free -= int(np.sum(mask))
        return free


@dataclass
class LmiConstraint:
    name: str
    build: Callable
    sense: str = ">="
    hard: bool = False
    size: int = 0

    @property
    def sign(self) -> float:
        return _SENSES[self.sense][0]

    @property
    def strict(self) -> bool:
        return _SENSES[self.sense][1]


class LmiProblem:
    """Collection of matrix variables and block constraints."""

    def __init__(self):
        self.variables: dict[str, MatrixVariable] = {}
        self.constraints: list[LmiConstraint] = []
        self._names: set[str] = set()

    # -- declaration
    def variable(self, name: str, shape, symmetric: bool = False,
                 positive: bool = False, zero_mask=None) -> MatrixVariable:
        if name in self.variables:
            raise ValueError(f"variable {name!r} declared twice")
        shape = (int(shape), int(shape)) if np.isscalar(shape) else tuple(int(k) for k in shape)
        if len(shape) != 2:
            raise ValueError("variables are matrices; use shape (1, 1) for scalars")
        if symmetric and shape[0] != shape[1]:
            raise ValueError(f"symmetric variable {name!r} must be square")
        if zero_mask is not None:
            zero_mask = np.asarray(zero_mask, dtype=bool)
            if zero_mask.shape != shape:
                raise ValueError(f"zero mask of {name!r} has the wrong shape")
            if symmetric and not np.array_equal(zero_mask, zero_mask.T):
                raise ValueError(f"zero mask of {name!r} must be symmetric")
        var = MatrixVariable(name, shape, symmetric, positive, zero_mask)
        self.variables[name] = var
        return var

    def scalar(self, name: str, positive: bool = False) -> MatrixVariable:
        return self.variable(name, (1, 1), symmetric=True, positive=positive)

    def add(self, name: str, build: Callable, sense: str = ">=", hard: bool = False):
        """Add ``build(v, bmat) <sense> 0``; ``>``/``<`` mean margin ``tau``."""
        if sense not in _SENSES:
            raise ValueError(f"unknown sense {sense!r}")
        if name in self._names:
            raise ValueError(f"constraint {name!r} declared twice")
        con = LmiConstraint(name, build, sense, hard)
        M = self._check(con)
        con.size = M.shape[0]
        self._names.add(name)
        self.constraints.append(con)
        return con

    @property
    def n_scalars(self) -> int:
        return sum(v.scalars for v in self.variables.values())

    # -- evaluation
    def _random_assignment(self, rng) -> dict:
        out = {}
        for v in self.variables.values():
            X = rng.standard_normal(v.shape)
            if v.symmetric:
                X = X + X.T
            if v.zero_mask is not None:
                X[v.zero_mask] = 0.0
            out[v.name] = X
        return out

    def _check(self, con: LmiConstraint) -> np.ndarray:
        rng = np.random.default_rng(12345)
        M = None
        for _ in range(2):
            try:
                M = self.evaluate(con, self._random_assignment(rng), symmetrize=False)
            except KeyError as err:
                raise ValueError(f"constraint {con.name!r} uses undeclared variable {err}") from None
            except ValueError as err:
                raise ValueError(f"constraint {con.name!r}: dimension mismatch ({err})") from None
            if M.ndim != 2 or M.shape[0] != M.shape[1]:
                raise ValueError(f"constraint {con.name!r} is not square")
            if not _is_symmetric(M, 1e-9):
                raise ValueError(f"constraint {con.name!r} is not symmetric")
        return M

    def evaluate(self, con, assignment: Mapping[str, np.ndarray],
                 symmetrize: bool = True) -> np.ndarray:
        """Numeric block matrix of a constraint (by object or name)."""
        if isinstance(con, str):
            con = next(c for c in self.constraints if c.name == con)
        v = {k: np.asarray(x, dtype=float) for k, x in assignment.items()}
        M = np.atleast_2d(np.asarray(con.build(v, np.block), dtype=float))
        return 0.5 * (M + M.T) if symmetrize else M

    def margins(self, assignment: Mapping[str, np.ndarray]) -> dict[str, float]:
        """Sign-adjusted minimum eigenvalue of every constraint."""
        out = {}
        for con in self.constraints:
            M = self.evaluate(con, assignment)
            if not np.all(np.isfinite(M)):
                out[con.name] = -np.inf
            else:
                out[con.name] = min_eigenvalue(con.sign * M)
        return out


@dataclass
class LmiSolution:
    status: str
    assignment: dict
    margins: dict
    required: dict
    objective: float = np.nan
    solver_status: str = ""
    message: str = ""

    @property
    def feasible(self) -> bool:
        return self.status == FEASIBLE

    def slack(self) -> dict[str, float]:
        """Margin minus the requirement of each constraint."""
        return {k: self.margins[k] - self.required[k] for k in self.margins}

    def worst(self) -> tuple[str, float]:
        sl = self.slack()
        if not sl:
            return "", np.inf
        name = min(sl, key=sl.get)
        return name, sl[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.assignment[name]


def _cvx_variable(v: MatrixVariable):
    if v.symmetric:
        return cp.Variable(v.shape, symmetric=True, name=v.name)
    return cp.Variable(v.shape, name=v.name)


def solve_feasibility(problem: LmiProblem, tau: float = 1e-6, tolerance: float = 1e-7,
                      max_iters: int = 500, box: float = 1e6, eta_pos: float = 1e-8,
                      t_cap: float = 1.0, solver: str | None = None) -> LmiSolution:
    """Search for an assignment satisfying every constraint.

    Soft constraints are relaxed by a common slack ``t`` which is maximised
    (up to ``t_cap``); hard constraints, positivity floors, zero patterns and
    the entry box ``|x| <= box`` are imposed as stated.  The returned status:

    * ``feasible``: the eigenvalue replay confirms every constraint, with
      ``>=0`` blocks at least ``-tolerance`` and strict blocks at least
      ``tau - tolerance``;
    * ``infeasible``: the maximal common slack is below ``-tolerance`` (or the
      hard constraints alone are infeasible), so no assignment in the box
      exists up to solver accuracy;
    * ``inconclusive``: anything else, including solver failures.
    """
    cvars = {name: _cvx_variable(v) for name, v in problem.variables.items()}
    t = cp.Variable(name="t")
    cons = [t <= t_cap]
    for name, v in problem.variables.items():
        X = cvars[name]
        cons.append(cp.abs(X) <= box)
        if v.zero_mask is not None and v.zero_mask.any():
            cons.append(cp.multiply(v.zero_mask.astype(float), X) == 0)
        if v.positive:
            if v.zero_mask is not None and v.zero_mask.any():
                keep = (~v.zero_mask).astype(float)
                cons.append(cp.multiply(keep, X - eta_pos) >= 0)
            else:
                cons.append(X >= eta_pos)
    required = {}
    for con in problem.constraints:
        M = con.build(cvars, cp.bmat)
        M = con.sign * 0.5 * (M + M.T)
        floor = tau if con.strict else 0.0
        required[con.name] = floor
        eye = np.eye(con.size)
        if con.hard:
            cons.append(M - floor * eye >> 0)
        else:
            cons.append(M - floor * eye - t * eye >> 0)
    prob = cp.Problem(cp.Maximize(t), cons)
    solver_status, message = "", ""
    order = [solver] if solver else ["CLARABEL", "SCS"]
    for name in order:
        try:
            if name == "SCS":
                # fallback only; the eigenvalue replay still decides the verdict
                prob.solve(solver=name, eps=1e-8, max_iters=max(max_iters * 20, 10000))
            elif name == "CLARABEL":
                prob.solve(solver=name, max_iter=max_iters)
            else:
                prob.solve(solver=name)
            solver_status = f"{name}:{prob.status}"
            if prob.status in ("optimal", "optimal_inaccurate", "infeasible"):
                break
        except cp.error.SolverError as err:
            solver_status, message = f"{name}:error", str(err)
            log.debug("solver %s failed: %s", name, err)
    status = prob.status
    if status == "infeasible":
        return LmiSolution(INFEASIBLE, {}, {}, required, -np.inf, solver_status,
                           "structural constraints are infeasible")
    values_ok = all(cvars[n].value is not None for n in cvars) and t.value is not None
    if status not in ("optimal", "optimal_inaccurate") or not values_ok:
        return LmiSolution(INCONCLUSIVE, {}, {}, required, np.nan, solver_status,
                           message or f"solver returned {status}")
    assignment = {}
    for name, v in problem.variables.items():
        X = np.array(cvars[name].value, dtype=float).reshape(v.shape)
        if v.symmetric:
            X = 0.5 * (X + X.T)
        if v.zero_mask is not None:
            X[v.zero_mask] = 0.0
        if v.positive:
            keep = np.ones(v.shape, bool) if v.zero_mask is None else ~v.zero_mask
            X[keep] = np.maximum(X[keep], eta_pos)
        assignment[name] = X
    margins = problem.margins(assignment)
    t_star = float(t.value)
    ok = all(margins[k] >= required[k] - tolerance for k in margins)
    if ok:
        verdict = FEASIBLE
    elif t_star < -tolerance and status == "optimal":
        verdict = INFEASIBLE
    else:
        verdict = INCONCLUSIVE
    return LmiSolution(verdict, assignment, margins, required, t_star, solver_status, message)
