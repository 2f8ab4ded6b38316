"""Passivating piecewise linear state feedback ``u = K(i) x``.

For every current cell ``i`` and successor cell ``j`` the 5x5 block matrix

    [[O11,  0,   O13,  O14,  0],
     [0,    O22, q c', q a', q],
     [O13', q c, O33,  D1',  0],
     [O14', q a, D1,   T(j), 0],
     [0,    q,   0,    0,    h]] >= 0

with ``O11 = U + U' - T - R``, ``O13 = U'C' + W'B2'``, ``O14 = U'A' + W'B1'``,
``O22 = 2q - (h + r)`` and ``O33 = D2' + D2 - G`` is imposed together with
``T(j) > 0``, ``h > 0`` and the side conditions

    (g1 + g2 + g3 + g4) I <= L(i) = diag(U^-T R U^-1, r / q^2)
    (g2 + g4) I <= G(i)

where ``g1 = 2 eps ||[A_K a]|| ||T^-1(j)||``, ``g2 = eps ||T^-1(j)|| ||D1||``,
``g3 = eps^2 ||T^-1(j)||`` and ``g4 = delta``.  The gain is ``K = W U^-1``
and the storage is ``V = 1/2 x' T^-1(i) x``.

The ``lifted`` formulation above is the default.  Its rows 2 and 5 contain
the principal minor ``[[2q - h - r, q], [q, h]]`` whose determinant is
``-(q - h)^2 - r h < 0`` for every ``r > 0``, so it can never be met.  The
opt-in ``reduced`` formulation drops the lifted rows; it requires
``a = c = 0`` in every cell (linear pieces through the origin) and then
uses ``L(i) = U^-T R U^-1`` on ``R^n``.

The side conditions are not convex in the decision variables.  They are
handled by solve-then-audit, then by a schedule of convex restrictions that
imply them, then by bisecting the cells that still fail.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .approx import PwaApproximation, approximate
from .lmi import (FEASIBLE, INCONCLUSIVE, INFEASIBLE, LmiProblem, LmiSolution,
                  min_eigenvalue, solve_feasibility, spectral_norm)
from .model import NonlinearSystem, PolyhedralPartition

__all__ = [
    "SynthesisOptions", "CellAudit", "SideConditionAudit", "Synthesis",
    "Theorem2Synthesis", "SynthesisFailure", "closed_loop_matrices",
    "assemble_thm2_lmi", "side_conditions_thm2", "replay_thm2", "synthesize",
]

log = logging.getLogger(__name__)


@dataclass
class SynthesisOptions:
    """Knobs shared by the synthesis routines.

    ``formulation`` is ``"lifted"`` (as printed) or ``"reduced"``;
    ``method`` picks the linearization (``"taylor"`` or ``"secant"``) and
    defaults to the one compatible with the formulation.  ``coupling`` is
    ``"envelope"`` (one common lower bound on the successor storage, a
    restriction) or ``"enumerate"`` (every successor explicitly).
    """

    formulation: str = "lifted"
    method: str | None = None
    coupling: str = "envelope"
    tau: float = 1e-6
    tolerance: float = 1e-7
    max_depth: int = 6
    escalations: int = 8
    nu_grid: tuple = (0.3, 1.0, 3.0)
    mu_start: float = 0.25
    sequential_iters: int = 30
    nu_factor: float = 0.9
    kappa_factor: float = 1.5
    stall_tol: float = 1e-3
    samples: int = 10_000
    seed: int = 0
    safety: float = 1.2
    max_cond: float = 1e8
    max_blocks: int = 2000
    solver: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.formulation not in ("lifted", "reduced"):
            raise ValueError("formulation must be 'lifted' or 'reduced'")
        if self.coupling not in ("envelope", "enumerate"):
            raise ValueError("coupling must be 'envelope' or 'enumerate'")
        if self.method is None:
            self.method = "secant" if self.formulation == "reduced" else "taylor"

    @property
    def reduced(self) -> bool:
        return self.formulation == "reduced"


# ------------------------------------------------------------ closed loop


def closed_loop_matrices(cell, K, B1, B2) -> dict:
    """``A_K = A + B1 K`` and ``C_K = C + B2 K`` with their lifted forms."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    B1 = np.atleast_2d(B1)
    B2 = np.atleast_2d(B2)
    n = cell.A.shape[0]
    if K.shape != (B1.shape[1], n):
        raise ValueError(f"K must have shape {(B1.shape[1], n)}")
    AK = cell.A + B1 @ K
    CK = cell.C + B2 @ K
    AK_bar = np.hstack([AK, cell.a[:, None]])
    AK_hat = np.vstack([AK_bar, np.append(np.zeros(n), 1.0)[None, :]])
    CK_bar = np.hstack([CK, cell.c[:, None]])
    return {"A_K": AK, "A_K_bar": AK_bar, "A_K_hat": AK_hat, "C_K": CK, "C_K_bar": CK_bar}


# ------------------------------------------------------------ assembly


def _get_u(v, i):
    return v[f"U{i}"] if f"U{i}" in v else v[f"T{i}"]


def _zeros(r, c):
    return np.zeros((r, c))


def assemble_thm2_lmi(i: int, j: int, pwa: PwaApproximation, v, bmat=np.block,
                      reduced: bool = False, Tj=None):
    """Block matrix of the synthesis inequality for cells ``(i, j)``.

    ``v`` maps ``T{k}``, ``U{k}``, ``W{k}``, ``R{k}``, ``G{k}``, ``q``, ``r``,
    ``h`` to numpy arrays or cvxpy expressions (scalars as 1x1).  ``Tj``
    overrides the successor block.
    """
    c = pwa[i]
    n, s = pwa.n, pwa.s
    T, U, W = v[f"T{i}"], _get_u(v, i), v[f"W{i}"]
    Tj = v[f"T{j}"] if Tj is None else Tj
    O11 = U + U.T - T - v[f"R{i}"]
    O13 = U.T @ c.C.T + W.T @ pwa.B2.T
    O14 = U.T @ c.A.T + W.T @ pwa.B1.T
    O33 = pwa.D2.T + pwa.D2 - v[f"G{i}"]
    D1 = pwa.D1
    if reduced:
        return bmat([[O11, O13, O14],
                     [O13.T, O33, D1.T],
                     [O14.T, D1, Tj]])
    q, r, h = v["q"], v["r"], v["h"]
    qc = q @ c.c[None, :]
    qa = q @ c.a[None, :]
    O22 = 2 * q - (h + r)
    return bmat([
        [O11, _zeros(n, 1), O13, O14, _zeros(n, 1)],
        [_zeros(1, n), O22, qc, qa, q],
        [O13.T, qc.T, O33, D1.T, _zeros(s, 1)],
        [O14.T, qa.T, D1, Tj, _zeros(n, 1)],
        [_zeros(1, n), q, _zeros(1, s), _zeros(1, n), h],
    ])


# ------------------------------------------------------------ audit


@dataclass
class CellAudit:
    index: int
    terms: tuple          # gamma (or rho) values entering the first condition
    g_terms: tuple        # values entering the G condition
    L_min: float
    G_min: float
    cond_U: float
    passed: bool

    @property
    def margin_L(self) -> float:
        return self.L_min - sum(self.terms)

    @property
    def margin_G(self) -> float:
        return self.G_min - sum(self.g_terms)

    @property
    def violation(self) -> float:
        return max(0.0, -self.margin_L, -self.margin_G)


@dataclass
class SideConditionAudit:
    cells: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cells)

    @property
    def failing(self) -> list[int]:
        return [c.index for c in self.cells if not c.passed]

    @property
    def total_violation(self) -> float:
        return float(sum(c.violation for c in self.cells))


def _inverse_norms(v, N):
    return [spectral_norm(np.linalg.inv(v[f"T{j}"])) for j in range(N)]


def _l_matrix(v, i, reduced):
    U = _get_u(v, i)
    Ui = np.linalg.inv(U)
    L = Ui.T @ v[f"R{i}"] @ Ui
    L = 0.5 * (L + L.T)
    if not reduced:
        q, r = float(v["q"][0, 0]), float(v["r"][0, 0])
        L = np.block([[L, np.zeros((L.shape[0], 1))],
                      [np.zeros((1, L.shape[0])), np.array([[r / q ** 2]])]])
    return L


def _cell_audit(i, terms, g_terms, v, reduced, tolerance, max_cond):
    U = _get_u(v, i)
    cond = float(np.linalg.cond(U))
    if not np.isfinite(cond) or cond > max_cond:
        return CellAudit(i, terms, g_terms, -np.inf, -np.inf, cond, False)
    L_min = min_eigenvalue(_l_matrix(v, i, reduced))
    G_min = min_eigenvalue(v[f"G{i}"])
    ok = (L_min - sum(terms) >= -tolerance) and (G_min - sum(g_terms) >= -tolerance)
    return CellAudit(i, terms, g_terms, L_min, G_min, cond, bool(ok))


def gains(v, N) -> list[np.ndarray]:
    return [v[f"W{i}"] @ np.linalg.inv(_get_u(v, i)) for i in range(N)]


def side_conditions_thm2(v, pwa: PwaApproximation, reduced: bool = False,
                         tolerance: float = 1e-7, max_cond: float = 1e8) -> SideConditionAudit:
    """Evaluate the gamma terms (maximised over successors) and both conditions."""
    N = len(pwa)
    tinv = max(_inverse_norms(v, N))
    d1 = spectral_norm(pwa.D1)
    out = []
    for i in range(N):
        c = pwa[i]
        U = _get_u(v, i)
        if np.linalg.cond(U) > max_cond:
            out.append(CellAudit(i, (), (), -np.inf, -np.inf, float(np.linalg.cond(U)), False))
            continue
        K = v[f"W{i}"] @ np.linalg.inv(U)
        cl = closed_loop_matrices(c, K, pwa.B1, pwa.B2)
        g1 = 2 * c.eps * spectral_norm(cl["A_K_bar"]) * tinv
        g2 = c.eps * tinv * d1
        g3 = c.eps ** 2 * tinv
        g4 = c.delta
        out.append(_cell_audit(i, (g1, g2, g3, g4), (g2, g4), v, reduced, tolerance, max_cond))
    return SideConditionAudit(out)


# ------------------------------------------------------------ LMI problems


def declare_synthesis_variables(prob: LmiProblem, pwa: PwaApproximation, reduced: bool,
                                tie_u: bool, corollary: bool = False):
    n, m, s = pwa.n, pwa.m, pwa.s
    for i in range(len(pwa)):
        prob.variable(f"T{i}", (n, n), symmetric=True)
        if not tie_u:
            prob.variable(f"U{i}", (n, n))
        prob.variable(f"W{i}", (m, n))
        if not corollary:
            prob.variable(f"R{i}", (n, n), symmetric=True)
            prob.variable(f"G{i}", (s, s), symmetric=True)
    if not reduced:
        prob.scalar("q")
        prob.scalar("h")
        if not corollary:
            prob.scalar("r")


def add_positivity(prob: LmiProblem, pwa: PwaApproximation, reduced: bool, corollary=False):
    for i in range(len(pwa)):
        prob.add(f"T{i}>0", lambda v, b, i=i: v[f"T{i}"], ">")
        if not corollary:
            prob.add(f"R{i}>0", lambda v, b, i=i: v[f"R{i}"], ">")
            prob.add(f"G{i}>0", lambda v, b, i=i: v[f"G{i}"], ">")
    if not reduced:
        prob.add("q>0", lambda v, b: v["q"], ">")
        prob.add("h>0", lambda v, b: v["h"], ">")
        if not corollary:
            prob.add("r>0", lambda v, b: v["r"], ">")


@dataclass(frozen=True)
class Escalation:
    """Parameters of a convex restriction that implies the side conditions.

    ``kind == "grid"`` ties ``U = T`` and bounds ``||A U + B1 W|| <= mu``,
    so the closed-loop norm is at most ``kappa = mu / nu``.  ``kind ==
    "sequential"`` keeps ``U`` free and imposes ``||(A U + B1 W) U^-1|| <=
    kappa`` through ``X' X <= kappa^2 S``, where ``S = U0'U + U'U0 - U0'U0``
    is a lower bound on ``U'U`` linearised at a previous iterate ``U0``.
    """

    kind: str
    nu: float
    kappa: float
    previous: dict | None = None

    @property
    def tie_u(self) -> bool:
        return self.kind == "grid"


def add_escalation(prob: LmiProblem, pwa: PwaApproximation, reduced: bool, esc: Escalation,
                   l_floor, g_floor):
    """Convex restrictions that imply the side conditions.

    With ``T(j) >= nu I`` every ``||T^-1(j)|| <= 1/nu`` and the closed-loop
    norm is at most ``esc.kappa``.  ``l_floor(i)`` and ``g_floor(i)`` return
    the resulting upper bounds on the required levels, and ``R >= l U' U``
    is imposed as the LMI ``[[R, U'], [U, I / l]] >= 0`` (plus
    ``r >= l q^2`` when lifted).
    """
    n, s = pwa.n, pwa.s
    eye_n = np.eye(n)
    nu, kappa = esc.nu, esc.kappa
    for j in range(len(pwa)):
        prob.add(f"nu{j}", lambda v, b, j=j: v[f"T{j}"] - nu * eye_n, ">=", hard=True)
    for i in range(len(pwa)):
        c = pwa[i]
        if esc.kind == "grid":
            mu = kappa * nu

            def gain_norm(v, b, i=i, c=c):
                X = c.A @ _get_u(v, i) + pwa.B1 @ v[f"W{i}"]
                return b([[mu * eye_n, X], [X.T, mu * eye_n]])
        else:
            U0 = np.asarray(_get_u(esc.previous, i), dtype=float)

            def gain_norm(v, b, i=i, c=c, U0=U0):
                U = v[f"U{i}"]
                X = c.A @ U + pwa.B1 @ v[f"W{i}"]
                S = U0.T @ U + U.T @ U0 - U0.T @ U0
                return b([[kappa ** 2 * S, X.T], [X, eye_n]])

        prob.add(f"kappa{i}", gain_norm, ">=", hard=True)
        lev = l_floor(i)
        if lev > 0:
            prob.add(f"Lfloor{i}", lambda v, b, i=i, lev=lev: b(
                [[v[f"R{i}"], _get_u(v, i).T], [_get_u(v, i), eye_n / lev]]), ">=", hard=True)
            if not reduced:
                prob.add(f"rfloor{i}", lambda v, b, lev=lev: b(
                    [[v["r"], v["q"]], [v["q"], np.eye(1) / lev]]), ">=", hard=True)
        gl = g_floor(i)
        if gl > 0:
            prob.add(f"Gfloor{i}", lambda v, b, i=i, gl=gl: v[f"G{i}"] - gl * np.eye(s), ">=",
                     hard=True)


@dataclass
class LmiOutcome:
    status: str
    solution: LmiSolution | None
    note: str = ""


def solve_with_coupling(build, opts: SynthesisOptions, n_blocks_full: int) -> LmiOutcome:
    """Solve with the chosen successor coupling and certify infeasibility.

    ``build(mode)`` returns an :class:`LmiProblem` for ``mode`` in
    ``envelope`` (restriction), ``diagonal`` (successor equal to the current
    cell only, a relaxation) and ``enumerate`` (exact).
    """
    kw = dict(tau=opts.tau, tolerance=opts.tolerance, **opts.solver)
    first = opts.coupling
    sol = solve_feasibility(build(first), **kw)
    if sol.status == FEASIBLE:
        return LmiOutcome(FEASIBLE, sol)
    if first == "enumerate":
        return LmiOutcome(sol.status, sol)
    relaxed = solve_feasibility(build("diagonal"), **kw)
    if relaxed.status == INFEASIBLE:
        return LmiOutcome(INFEASIBLE, relaxed,
                          "infeasible already for successor = current cell")
    if n_blocks_full <= opts.max_blocks:
        full = solve_feasibility(build("enumerate"), **kw)
        return LmiOutcome(full.status, full)
    return LmiOutcome(INCONCLUSIVE, sol, "common-envelope restriction failed; "
                      "full enumeration exceeds the block budget")


def _thm2_problem(pwa, opts, mode, escalation=None):
    reduced = opts.reduced
    N, n = len(pwa), pwa.n
    tie_u = escalation is not None and escalation.tie_u
    prob = LmiProblem()
    declare_synthesis_variables(prob, pwa, reduced, tie_u)
    add_positivity(prob, pwa, reduced)
    if mode == "envelope":
        prob.variable("Tm", (n, n), symmetric=True)
        for j in range(N):
            prob.add(f"env{j}", lambda v, b, j=j: v[f"T{j}"] - v["Tm"], ">=")
        for i in range(N):
            prob.add(f"lmi{i}", lambda v, b, i=i: assemble_thm2_lmi(i, 0, pwa, v, b, reduced, Tj=v["Tm"]))
    elif mode == "diagonal":
        for i in range(N):
            prob.add(f"lmi{i},{i}", lambda v, b, i=i: assemble_thm2_lmi(i, i, pwa, v, b, reduced))
    else:
        for i in range(N):
            for j in range(N):
                prob.add(f"lmi{i},{j}", lambda v, b, i=i, j=j: assemble_thm2_lmi(i, j, pwa, v, b, reduced))
    if escalation is not None:
        nu = escalation.nu
        d1 = spectral_norm(pwa.D1)

        def l_floor(i):
            c = pwa[i]
            kbar = escalation.kappa + np.linalg.norm(c.a)
            return (2 * c.eps * kbar + c.eps * d1 + c.eps ** 2) / nu + c.delta

        def g_floor(i):
            c = pwa[i]
            return c.eps * d1 / nu + c.delta

        add_escalation(prob, pwa, reduced, escalation, l_floor, g_floor)
    return prob


def replay_thm2(v, pwa: PwaApproximation, reduced: bool) -> dict:
    """Minimum eigenvalue of every ``(i, j)`` block and of the positivity terms."""
    N = len(pwa)
    out = {}
    for i in range(N):
        for j in range(N):
            M = assemble_thm2_lmi(i, j, pwa, v, np.block, reduced)
            out[("lmi", i, j)] = min_eigenvalue(0.5 * (M + M.T))
        out[("T", i)] = min_eigenvalue(v[f"T{i}"])
        out[("R", i)] = min_eigenvalue(v[f"R{i}"])
        out[("G", i)] = min_eigenvalue(v[f"G{i}"])
    if not reduced:
        for name in ("q", "r", "h"):
            out[(name,)] = float(v[name][0, 0])
    return out


# ------------------------------------------------------------ results


@dataclass
class Synthesis:
    """A verified controller: per-cell gains and storage matrices."""

    kind: str
    formulation: str
    partition: PolyhedralPartition
    pwa: PwaApproximation
    values: dict
    K: list
    audit: SideConditionAudit
    replay: dict
    refined: bool = False
    history: list = field(default_factory=list)
    channel: object = None

    certified = True

    @property
    def T(self) -> list:
        return [self.values[f"T{i}"] for i in range(len(self.pwa))]

    @property
    def U(self) -> list:
        return [_get_u(self.values, i) for i in range(len(self.pwa))]

    @property
    def W(self) -> list:
        return [self.values[f"W{i}"] for i in range(len(self.pwa))]

    def gain(self, i: int) -> np.ndarray:
        return self.K[i]

    def storage(self, x, i: int) -> float:
        x = np.asarray(x, dtype=float)
        return 0.5 * float(x @ np.linalg.solve(self.values[f"T{i}"], x))

    def min_replay_margin(self) -> float:
        return min(self.replay.values())

    def gain_consistency(self) -> float:
        """Largest ``||W - K U|| / ||W||`` over cells."""
        worst = 0.0
        for i, K in enumerate(self.K):
            W = self.values[f"W{i}"]
            U = _get_u(self.values, i)
            nw = max(spectral_norm(W), 1e-300)
            worst = max(worst, spectral_norm(W - K @ U) / nw)
        return worst


class Theorem2Synthesis(Synthesis):
    pass


@dataclass
class SynthesisFailure:
    reason: str
    cell: int | None
    partition: PolyhedralPartition
    pwa: PwaApproximation | None = None
    history: list = field(default_factory=list)
    solution: LmiSolution | None = field(default=None, repr=False)

    certified = False

    def describe(self) -> str:
        where = ""
        if self.cell is not None:
            where = f" ({self.partition.describe(self.cell)})"
        return f"{self.reason}{where}"


# ------------------------------------------------------------ driver


def run_refinement(kind: str, solve_partition, build_pwa, partition: PolyhedralPartition,
                   opts: SynthesisOptions, can_refine: bool):
    """Note-style loop: solve, audit, escalate, then bisect failing cells."""
    depth = [0] * len(partition)
    history = []
    pwa = build_pwa(partition)
    refined = False
    while True:
        result = solve_partition(pwa)
        history.append({"cells": len(pwa), "status": result["status"],
                        "failing": result.get("failing", []), "note": result.get("note", "")})
        if result["status"] == "certified":
            return result["make"](pwa, history, refined)
        if result["status"] != "side":
            return SynthesisFailure(result.get("note") or f"LMI {result['status']}",
                                    result.get("cell"), pwa.partition, pwa, history,
                                    result.get("solution"))
        failing = result["failing"]
        if not can_refine:
            return SynthesisFailure("side conditions fail and the PWA system is fixed",
                                    failing[0], pwa.partition, pwa, history)
        for i in failing:
            if depth[i] >= opts.max_depth:
                return SynthesisFailure("refinement limit reached", i, pwa.partition, pwa, history)
            if pwa.partition[i].axis is None:
                return SynthesisFailure("cell cannot be bisected", i, pwa.partition, pwa, history)
        new_partition, parent = pwa.partition.bisect(failing)
        new_pwa = build_pwa(new_partition)
        new_depth = []
        for k in range(len(new_partition)):
            p = parent[k]
            if p in failing:
                old, new = pwa[p], new_pwa[k]
                shrank = new.eps < old.eps if old.eps > 0 else new.delta < old.delta
                if not shrank:
                    return SynthesisFailure("bisection did not reduce the residual bound",
                                            p, pwa.partition, pwa, history)
                new_depth.append(depth[p] + 1)
            else:
                new_depth.append(depth[p])
        log.info("%s: bisected %d cells, now %d", kind, len(failing), len(new_partition))
        depth, pwa, refined = new_depth, new_pwa, True


def _closed_loop_bound(v, pwa) -> tuple[float, float]:
    """``(min eig T, max ||A + B1 K||)`` of an assignment."""
    N = len(pwa)
    Ks = gains(v, N)
    nu = min(min_eigenvalue(v[f"T{j}"]) for j in range(N))
    kappa = max(spectral_norm(pwa[i].A + pwa.B1 @ Ks[i]) for i in range(N))
    return nu, kappa


def escalate(build_problem, audit_fn, pwa, opts: SynthesisOptions, base_solution):
    """Try the convex restrictions; returns ``(solution, audit)`` or the best failure.

    A grid over ``(nu, mu)`` with ``U = T`` is tried first.  If it fails, a
    sequence of restrictions linearised at the current iterate is solved,
    starting from the unrestricted solution; every iterate that the solver
    declares feasible satisfies the side conditions by construction, and the
    audit confirms it.  The sequence stops once the margin stalls.
    """
    best = None
    if base_solution is not None:
        best = (base_solution, audit_fn(base_solution.assignment))
        if best[1].passed:
            return best
    kw = dict(tau=opts.tau, tolerance=opts.tolerance, **opts.solver)

    def consider(sol, label):
        nonlocal best
        if sol.status != FEASIBLE:
            log.debug("escalation %s: %s (t=%.3g)", label, sol.status, sol.objective)
            return False
        aud = audit_fn(sol.assignment)
        log.debug("escalation %s: %d failing", label, len(aud.failing))
        if aud.passed:
            best = (sol, aud)
            return True
        if best is None or (len(aud.failing), aud.total_violation) < (
                len(best[1].failing), best[1].total_violation):
            best = (sol, aud)
        return False

    for nu in opts.nu_grid:
        last, worse = -np.inf, 0
        for k in range(opts.escalations + 1):
            mu = nu * opts.mu_start * 2 ** k
            sol = solve_feasibility(build_problem(Escalation("grid", nu, mu / nu)), **kw)
            if consider(sol, f"grid nu={nu:g} mu={mu:g}"):
                return best
            # a larger mu only loosens the gain bound while raising the floors;
            # once the margin drops twice in a row the rest of this row is skipped
            if np.isfinite(sol.objective) and np.isfinite(last):
                worse = worse + 1 if sol.objective < last else 0
                if worse >= 2:
                    break
            if np.isfinite(sol.objective):
                last = sol.objective
    if base_solution is None or not base_solution.assignment:
        return best
    v = dict(base_solution.assignment)
    previous, stall, steps = -np.inf, 0, []
    for it in range(opts.sequential_iters):
        try:
            nu, kappa = _closed_loop_bound(v, pwa)
        except np.linalg.LinAlgError:
            break
        if not (nu > 0 and np.isfinite(kappa)):
            break
        esc = Escalation("sequential", opts.nu_factor * nu, opts.kappa_factor * kappa, v)
        sol = solve_feasibility(build_problem(esc), **kw)
        if consider(sol, f"sequential {it} nu={esc.nu:.3g} kappa={esc.kappa:.3g}"):
            return best
        if not sol.assignment:
            break
        gain = sol.objective - previous
        stall = stall + 1 if gain <= opts.stall_tol * max(1.0, abs(sol.objective)) else 0
        if stall >= 3:
            break
        if np.isfinite(gain) and gain > 0:
            steps.append(gain)
        if _hopeless(sol.objective, steps, opts.tolerance):
            log.debug("escalation sequential: margin converging below zero")
            break
        previous = max(previous, sol.objective)
        v = sol.assignment
    return best


def _hopeless(t: float, steps: list, tolerance: float) -> bool:
    """Geometric extrapolation of the last improvements stays below zero."""
    if len(steps) < 3 or t >= 0:
        return False
    r = steps[-1] / steps[-2]
    if r >= 0.95 or steps[-2] > steps[-3] * 1.05:
        return False
    return t + steps[-1] * r / (1.0 - r) < -10 * tolerance


def synthesize(system, partition: PolyhedralPartition | None = None,
               opts: SynthesisOptions | None = None):
    """Synthesize passivating gains.

    ``system`` is a :class:`NonlinearSystem` (cells are then refined on
    demand) or a fixed :class:`PwaApproximation`.  Returns a
    :class:`Theorem2Synthesis` or a :class:`SynthesisFailure`.
    """
    opts = opts or SynthesisOptions()
    if isinstance(system, PwaApproximation):
        fixed = system
        partition = fixed.partition
        build_pwa = lambda part: fixed  # noqa: E731
        can_refine = False
    else:
        if partition is None:
            raise ValueError("a partition is required for a nonlinear system")
        build_pwa = lambda part: approximate(system, part, opts.method, opts.samples,  # noqa: E731
                                             opts.seed, opts.safety)
        can_refine = True
    reduced = opts.reduced

    def solve_partition(pwa):
        if reduced:
            _require_linear_pieces(pwa)
        N = len(pwa)
        out = solve_with_coupling(lambda mode: _thm2_problem(pwa, opts, mode), opts, N * N)
        if out.status != FEASIBLE:
            return {"status": out.status, "solution": out.solution,
                    "note": _lmi_note(out, reduced), "cell": _worst_cell(out.solution)}
        audit_fn = lambda v: side_conditions_thm2(v, pwa, reduced, opts.tolerance,  # noqa: E731
                                                  opts.max_cond)
        sol, aud = escalate(lambda esc: _thm2_problem(pwa, opts, opts.coupling, esc),
                            audit_fn, pwa, opts, out.solution)
        if not aud.passed:
            return {"status": "side", "failing": aud.failing, "solution": sol}

        def make(pwa, history, refined):
            v = sol.assignment
            rep = replay_thm2(v, pwa, reduced)
            return Theorem2Synthesis("theorem2", opts.formulation, pwa.partition, pwa, v,
                                     gains(v, N), aud, rep, refined, history)

        return {"status": "certified", "make": make}

    return run_refinement("theorem2", solve_partition, build_pwa, partition, opts, can_refine)


def _require_linear_pieces(pwa: PwaApproximation):
    for c in pwa.cells:
        if np.any(c.a != 0) or np.any(c.c != 0):
            raise ValueError("the reduced formulation needs a = c = 0 in every cell "
                             "(use the secant linearization)")


def _worst_cell(sol: LmiSolution | None):
    if sol is None or not sol.margins:
        return None
    name, _ = sol.worst()
    digits = "".join(ch if ch.isdigit() or ch == "," else " " for ch in name).split()
    if not digits:
        return None
    return int(digits[0].split(",")[0])


LIFTED_NOTE_THM2 = ("the lifted rows force det[[2q-h-r, q], [q, h]] = -(q-h)^2 - r h < 0, "
                    "so no r > 0 can satisfy them")


def _lmi_note(out: LmiOutcome, reduced: bool, lifted_note: str = LIFTED_NOTE_THM2) -> str:
    base = f"LMI {out.status}"
    if out.note:
        base += f": {out.note}"
    if out.status != FEASIBLE and not reduced and lifted_note:
        base += "; " + lifted_note
    return base
