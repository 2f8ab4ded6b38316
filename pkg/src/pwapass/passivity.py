"""Passivity certificate for the uncontrolled plant (u = 0).

Storage is piecewise quadratic in the lifted state, ``V = 1/2 xb' Pb(i) xb``
on cell ``i``, with ``Pb(i) = diag(P(i), 0)`` on origin cells.  For every
pair of current cell ``i`` and successor cell ``j`` the block matrix

    Lam(i, j) = [[Lam11, Lam12], [Lam12', Lam22]] <= 0

with

    Lam11 = Ah' Pb(j) Ah - Pb(i) + Eb' W Eb + (rho1 + rho2 + rho3 + rho4) I
    Lam12 = Ah' Pb(j) D1h - Cb'
    Lam22 = D1h' Pb(j) D1h - (D2' + D2) + (rho2 + rho4) I

and the cell positivity ``Pb(i) - Eb' R Eb > 0`` certify passivity, where
``rho1 = 2 eps ||Pb(j)|| ||Ah||``, ``rho2 = eps ||Pb(j)|| ||D1h||``,
``rho3 = eps^2 ||Pb(j)||`` and ``rho4 = delta``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .approx import PwaApproximation
from .lmi import (FEASIBLE, INFEASIBLE, LmiProblem, LmiSolution, min_eigenvalue,
                  solve_feasibility, spectral_norm)

__all__ = [
    "Theorem1Certificate", "NotCertified", "rho_terms", "assemble_lambda",
    "positivity_block", "check_passivity", "replay_theorem1",
]

log = logging.getLogger(__name__)


def rho_terms(pwa: PwaApproximation, i: int, pbar_norm: float) -> tuple[float, float, float, float]:
    """``(rho1, rho2, rho3, rho4)`` for cell ``i`` and a successor norm ``||Pb(j)||``."""
    c = pwa[i]
    eps = c.eps
    return (2.0 * eps * pbar_norm * spectral_norm(c.A_hat),
            eps * pbar_norm * spectral_norm(pwa.D1_hat),
            eps ** 2 * pbar_norm,
            c.delta)


def assemble_lambda(i: int, j: int, pwa: PwaApproximation, vars, rho=None, bmat=np.block,
                    Pj=None):
    """Block matrix ``Lam(i, j)``.

    ``vars`` maps ``P{k}``, ``W{k}`` to values (numpy arrays or cvxpy
    expressions).  ``rho`` defaults to the printed values from the numeric
    ``||Pb(j)||``; ``Pj`` overrides the successor storage matrix.
    """
    ci = pwa[i]
    n, s = pwa.n, pwa.s
    Ah, D1h, Cb = ci.A_hat, pwa.D1_hat, ci.C_bar
    Pi = vars[f"P{i}"]
    Pj = vars[f"P{j}"] if Pj is None else Pj
    if rho is None:
        rho = rho_terms(pwa, i, spectral_norm(np.asarray(Pj, dtype=float)))
    r1, r2, r3, r4 = rho
    L11 = Ah.T @ Pj @ Ah - Pi + (r1 + r2 + r3 + r4) * np.eye(n + 1)
    Eb = pwa.partition[i].sprocedure_rows
    if Eb.shape[0] > 0:
        L11 = L11 + Eb.T @ vars[f"W{i}"] @ Eb
    L12 = Ah.T @ Pj @ D1h - Cb.T
    L22 = D1h.T @ Pj @ D1h - (pwa.D2.T + pwa.D2) + (r2 + r4) * np.eye(s)
    return bmat([[L11, L12], [L12.T, L22]])


def positivity_block(i: int, pwa: PwaApproximation, vars):
    """``Pb(i) - Eb' R Eb``; on origin cells only the ``n x n`` state block.

    On origin cells the last row and column of ``Pb(i)`` vanish, so the
    lifted matrix cannot be positive definite; the condition that makes the
    storage positive there is ``P(i) - E' R E > 0``.
    """
    cell = pwa.partition[i]
    n = pwa.n
    P = vars[f"P{i}"]
    Eb = cell.sprocedure_rows
    if cell.contains_origin:
        block = P[:n, :n]
        if Eb.shape[0]:
            E = Eb[:, :n]
            block = block - E.T @ vars[f"R{i}"] @ E
        return block
    if Eb.shape[0]:
        return P - Eb.T @ vars[f"R{i}"] @ Eb
    return P


@dataclass
class Theorem1Certificate:
    P: list
    W: list
    R: list
    rho: dict
    lambda_margins: dict
    positivity_margins: dict
    iterations: int
    tau: float
    tolerance: float

    certified = True

    def storage(self, x, i: int) -> float:
        xb = np.append(np.asarray(x, dtype=float), 1.0)
        return 0.5 * float(xb @ self.P[i] @ xb)


@dataclass
class NotCertified:
    reason: str
    worst_pair: tuple | None = None
    margin: float = np.nan
    iterations: int = 0
    solution: LmiSolution | None = field(default=None, repr=False)

    certified = False


def _declare(prob: LmiProblem, pwa: PwaApproximation):
    n = pwa.n
    for i in range(len(pwa)):
        cell = pwa.partition[i]
        mask = None
        if cell.contains_origin:
            mask = np.zeros((n + 1, n + 1), bool)
            mask[n, :] = mask[:, n] = True
        prob.variable(f"P{i}", (n + 1, n + 1), symmetric=True, zero_mask=mask)
        r = cell.sprocedure_rows.shape[0]
        if r:
            prob.variable(f"W{i}", (r, r), symmetric=True, positive=True)
            prob.variable(f"R{i}", (r, r), symmetric=True, positive=True)


def _build_problem(pwa: PwaApproximation, bound: float | None, coupling: str) -> LmiProblem:
    N, n = len(pwa), pwa.n
    prob = LmiProblem()
    _declare(prob, pwa)
    for i in range(N):
        prob.add(f"pos{i}", lambda v, b, i=i: positivity_block(i, pwa, v), ">")
    rho = {i: (rho_terms(pwa, i, bound) if bound is not None else (0.0,) * 4)
           for i in range(N)}
    if bound is not None:
        eye = np.eye(n + 1)
        for j in range(N):
            prob.add(f"norm_up{j}", lambda v, b, j=j: bound * eye - v[f"P{j}"], ">=", hard=True)
            prob.add(f"norm_lo{j}", lambda v, b, j=j: bound * eye + v[f"P{j}"], ">=", hard=True)
    if coupling == "envelope":
        prob.variable("S", (n + 1, n + 1), symmetric=True)
        for j in range(N):
            prob.add(f"env{j}", lambda v, b, j=j: v["S"] - v[f"P{j}"], ">=")
        for i in range(N):
            prob.add(f"lam{i}", lambda v, b, i=i: assemble_lambda(i, 0, pwa, v, rho[i], b, Pj=v["S"]), "<=")
    elif coupling == "enumerate":
        for i in range(N):
            for j in range(N):
                prob.add(f"lam{i},{j}", lambda v, b, i=i, j=j: assemble_lambda(i, j, pwa, v, rho[i], b), "<=")
    else:
        raise ValueError(f"unknown coupling {coupling!r}")
    return prob


def replay_theorem1(pwa: PwaApproximation, P, W, R, tau: float = 1e-6,
                    tolerance: float = 1e-7) -> tuple[dict, dict, dict]:
    """Recompute every condition with the printed rho values.

    Returns ``(lambda_margins, positivity_margins, rho)`` where margins are
    ``max eig(Lam)`` (must be <= tolerance) and ``min eig`` of the
    positivity blocks (must be >= tau - tolerance).
    """
    N = len(pwa)
    vals = {}
    for i in range(N):
        vals[f"P{i}"] = np.asarray(P[i], dtype=float)
        if W[i] is not None:
            vals[f"W{i}"] = np.asarray(W[i], dtype=float)
            vals[f"R{i}"] = np.asarray(R[i], dtype=float)
    lam, rho = {}, {}
    for i in range(N):
        for j in range(N):
            rho[(i, j)] = rho_terms(pwa, i, spectral_norm(vals[f"P{j}"]))
            M = assemble_lambda(i, j, pwa, vals, rho[(i, j)])
            lam[(i, j)] = -min_eigenvalue(-0.5 * (M + M.T))
    pos = {}
    for i in range(N):
        B = positivity_block(i, pwa, vals)
        pos[i] = min_eigenvalue(0.5 * (B + B.T))
    return lam, pos, rho


def check_passivity(pwa: PwaApproximation, tau: float = 1e-6, tolerance: float = 1e-7,
                    max_iter: int = 10, coupling: str = "envelope", **solver_opts):
    """Search for a certificate; returns :class:`Theorem1Certificate` or :class:`NotCertified`.

    The rho terms depend on ``||Pb(j)||``.  A first solve uses rho = 0, which
    relaxes every condition, so its infeasibility settles the question.
    Later solves impose ``-pi I <= Pb(j) <= pi I`` and use rho computed from
    ``pi``, with ``pi`` taken from the previous iterate, so each solve stays
    linear and its output satisfies the printed conditions by construction.
    A final replay recomputes rho from the actual norms and checks all pairs.
    """
    N = len(pwa)
    nonzero = bool(np.any(pwa.eps > 0) or np.any(pwa.delta > 0))
    bound = None
    sol = None
    for it in range(1, max_iter + 1):
        prob = _build_problem(pwa, bound, coupling)
        sol = solve_feasibility(prob, tau=tau, tolerance=tolerance, **solver_opts)
        log.info("theorem 1 iteration %d: %s (t=%.3g)", it, sol.status, sol.objective)
        if sol.status == FEASIBLE and (bound is not None or not nonzero):
            break
        if sol.status == INFEASIBLE and bound is None:
            name, margin = sol.worst()
            return NotCertified("conditions infeasible even without the rho terms",
                                _pair_of(name), margin, it, sol)
        if not sol.assignment:
            return NotCertified(f"solver gave no assignment ({sol.solver_status})",
                                None, np.nan, it, sol)
        new_bound = max(spectral_norm(sol[f"P{j}"]) for j in range(N))
        if bound is not None and new_bound >= bound * (1 - 1e-9):
            new_bound = 0.5 * bound
        bound = max(new_bound, 1e-9)
    if sol is None or sol.status != FEASIBLE:
        name, margin = sol.worst() if sol is not None else ("", np.nan)
        return NotCertified(f"no consistent rho bound after {max_iter} iterations",
                            _pair_of(name), margin, max_iter, sol)
    P = [sol[f"P{i}"] for i in range(N)]
    W = [sol.assignment.get(f"W{i}") for i in range(N)]
    R = [sol.assignment.get(f"R{i}") for i in range(N)]
    lam, pos, rho = replay_theorem1(pwa, P, W, R, tau, tolerance)
    worst_pair = max(lam, key=lam.get)
    if lam[worst_pair] > tolerance:
        return NotCertified("replay rejected the solver output", worst_pair,
                            -lam[worst_pair], it, sol)
    worst_cell = min(pos, key=pos.get)
    if pos[worst_cell] < tau - tolerance:
        return NotCertified("replay rejected cell positivity", (worst_cell, worst_cell),
                            pos[worst_cell] - tau, it, sol)
    return Theorem1Certificate(P, W, R, rho, lam, pos, it, tau, tolerance)


def _pair_of(name: str):
    digits = name.lstrip("abcdefghijklmnopqrstuvwxyz_")
    if not digits:
        return None
    parts = tuple(int(p) for p in digits.split(","))
    return parts if len(parts) > 1 else (parts[0], parts[0])
