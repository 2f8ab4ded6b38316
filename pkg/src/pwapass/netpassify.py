"""Passivating feedback over a Gilbert-Elliott packet-loss channel.

Control packets reach the actuator with ``v[k] = 1`` and are lost with
``v[k] = 0``; a lost packet means ``u[k] = 0``.  The controller learns
``v[k-1]`` from acknowledgments, so the arrival probability of the current
packet is ``pbar = alpha`` after a loss and ``pbar = 1 - beta`` after a
success.  Because the gains do not switch on ``v[k-1]``, every condition is
imposed for both values of ``pbar`` with shared variables.

For cells ``i`` (current), ``j`` (successor when the packet arrives) and
``l`` (successor when it is lost) the 7x7 block matrix with rows of sizes
``n, 1, s, n, 1, n, 1``

    [[O11,  0,   O13,  O14,  0,    O16,  0   ],
     [0,    O22, q c', q a', q,    q a', q   ],
     [O13', q c, O33,  D1',  0,    D1',  0   ],
     [O14', q a, D1,   O44,  0,    0,    0   ],
     [0,    q,   0,    0,    O55,  0,    0   ],
     [O16', q a, D1,   0,    0,    O66,  0   ],
     [0,    q,   0,    0,    0,    0,    O77 ]] >= 0

uses ``O13 = U'C' + pbar W'B2'``, ``O16 = U'A'``, ``O44 = T(j)/pbar``,
``O55 = h/pbar``, ``O66 = T(l)/(1-pbar)``, ``O77 = h/(1-pbar)`` and the
remaining blocks as in the deterministic synthesis.  The pure PWA variant
drops ``R``, ``G`` and ``r``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .approx import PwaApproximation, approximate
from .lmi import FEASIBLE, LmiProblem, min_eigenvalue, solve_feasibility, spectral_norm
from .model import PolyhedralPartition
from .passify import (CellAudit, SideConditionAudit, Synthesis, SynthesisFailure,
                      SynthesisOptions, _cell_audit, _get_u, _inverse_norms, _lmi_note,
                      _require_linear_pieces, _worst_cell, _zeros, add_escalation,
                      add_positivity, closed_loop_matrices, declare_synthesis_variables,
                      escalate, gains, run_refinement, solve_with_coupling)

__all__ = [
    "GilbertElliottChannel", "sample_channel", "assemble_thm3_lmi",
    "side_conditions_thm3", "replay_thm3", "Theorem3Synthesis", "Corollary1Synthesis",
    "synthesize_networked", "synthesize_pwa_networked", "cross_replay",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GilbertElliottChannel:
    """Two-state Markov packet-arrival chain.

    ``alpha = P(v=1 | previous v=0)`` and ``1 - beta = P(v=1 | previous v=1)``;
    the first packet arrives with the stationary probability
    ``alpha / (alpha + beta)``.
    """

    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("alpha", "beta"):
            val = getattr(self, name)
            if not 0.0 < val < 1.0:
                raise ValueError(f"{name} must lie strictly between 0 and 1 (got {val}); "
                                 "loss-free or always-lossy links are deterministic, "
                                 "use the deterministic synthesis instead")

    @property
    def stationary(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    @property
    def pbar_values(self) -> tuple[float, float]:
        return (self.alpha, 1.0 - self.beta)

    def pbar(self, previous: int | None) -> float:
        """Arrival probability given the last acknowledged outcome."""
        if previous is None:
            return self.stationary
        return self.alpha if previous == 0 else 1.0 - self.beta


def sample_channel(ch: GilbertElliottChannel, horizon: int, seed) -> np.ndarray:
    """Arrival indicators ``v[0..horizon-1]`` (1 = received)."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    u = np.random.default_rng(seed).random(horizon)
    v = np.empty(horizon, dtype=np.int8)
    p_after = (ch.alpha, 1.0 - ch.beta)
    v[0] = u[0] < ch.stationary
    for k in range(1, horizon):
        v[k] = u[k] < p_after[v[k - 1]]
    return v


LIFTED_NOTE_THM3 = ("the Schur complement of the lifted rows is -(q-h)^2/h - r < 0, "
                    "so no r > 0 can satisfy them")
LIFTED_NOTE_COR = ("the Schur complement of the lifted rows is -(q-h)^2/h, "
                   "which leaves no strict margin")


def _block_sizes(n, s, reduced):
    return [n, s, n, n] if reduced else [n, 1, s, n, 1, n, 1]


def assemble_thm3_lmi(i: int, j: int, l: int, pbar: float, pwa: PwaApproximation, v,
                      bmat=np.block, reduced: bool = False, corollary: bool = False,
                      Tj=None, Tl=None):
    """Block matrix for cells ``(i, j, l)`` and arrival probability ``pbar``."""
    if not 0.0 < pbar < 1.0:
        raise ValueError("pbar must lie strictly between 0 and 1")
    c = pwa[i]
    n, s = pwa.n, pwa.s
    T, U, W = v[f"T{i}"], _get_u(v, i), v[f"W{i}"]
    Tj = v[f"T{j}"] if Tj is None else Tj
    Tl = v[f"T{l}"] if Tl is None else Tl
    O11 = U + U.T - T
    O33 = pwa.D2.T + pwa.D2
    if not corollary:
        O11 = O11 - v[f"R{i}"]
        O33 = O33 - v[f"G{i}"]
    O13 = U.T @ c.C.T + pbar * (W.T @ pwa.B2.T)
    O14 = U.T @ c.A.T + W.T @ pwa.B1.T
    O16 = U.T @ c.A.T
    O44 = Tj / pbar
    O66 = Tl / (1.0 - pbar)
    D1 = pwa.D1
    Znn = _zeros(n, n)
    if reduced:
        return bmat([[O11, O13, O14, O16],
                     [O13.T, O33, D1.T, D1.T],
                     [O14.T, D1, O44, Znn],
                     [O16.T, D1, Znn, O66]])
    q, h = v["q"], v["h"]
    O22 = 2 * q - h if corollary else 2 * q - (h + v["r"])
    qc = q @ c.c[None, :]
    qa = q @ c.a[None, :]
    z1n, zn1, z11 = _zeros(1, n), _zeros(n, 1), _zeros(1, 1)
    zs1, z1s = _zeros(s, 1), _zeros(1, s)
    return bmat([
        [O11, zn1, O13, O14, zn1, O16, zn1],
        [z1n, O22, qc, qa, q, qa, q],
        [O13.T, qc.T, O33, D1.T, zs1, D1.T, zs1],
        [O14.T, qa.T, D1, O44, zn1, Znn, zn1],
        [z1n, q, z1s, z1n, h / pbar, z1n, z11],
        [O16.T, qa.T, D1, Znn, zn1, O66, zn1],
        [z1n, q, z1s, z1n, z11, z1n, h / (1.0 - pbar)],
    ])


def side_conditions_thm3(v, pwa: PwaApproximation, ch: GilbertElliottChannel,
                         reduced: bool = False, tolerance: float = 1e-7,
                         max_cond: float = 1e8) -> SideConditionAudit:
    """rho terms maximised over successors and over both arrival probabilities."""
    N = len(pwa)
    tinv = max(_inverse_norms(v, N))
    d1 = spectral_norm(pwa.D1)
    out = []
    for i in range(N):
        c = pwa[i]
        U = _get_u(v, i)
        cond = float(np.linalg.cond(U))
        if not np.isfinite(cond) or cond > max_cond:
            out.append(CellAudit(i, (), (), -np.inf, -np.inf, cond, False))
            continue
        K = v[f"W{i}"] @ np.linalg.inv(U)
        akb = spectral_norm(closed_loop_matrices(c, K, pwa.B1, pwa.B2)["A_K_bar"])
        ab = spectral_norm(c.A_bar)
        best, best_g = None, None
        for p in ch.pbar_values:
            e = c.eps
            rho = (2 * p * e * akb * tinv, p * e * tinv * d1, p * e ** 2 * tinv,
                   2 * (1 - p) * e * ab * tinv, (1 - p) * e * tinv * d1,
                   (1 - p) * e ** 2 * tinv, c.delta)
            if best is None or sum(rho) > sum(best):
                best = rho
            g = (rho[1], rho[4], rho[6])
            if best_g is None or sum(g) > sum(best_g):
                best_g = g
        out.append(_cell_audit(i, best, best_g, v, reduced, tolerance, max_cond))
    return SideConditionAudit(out)


def replay_thm3(v, pwa: PwaApproximation, ch: GilbertElliottChannel, reduced: bool = False,
                corollary: bool = False) -> dict:
    """Minimum eigenvalue over all ``(j, l)`` for each ``(i, pbar)``, plus positivity.

    Every one of the ``N^3`` combinations per ``pbar`` is evaluated; for a
    fixed ``i`` only the two successor blocks change, so they are stacked and
    decomposed in one batch.
    """
    N, n, s = len(pwa), pwa.n, pwa.s
    sizes = _block_sizes(n, s, reduced)
    offs = np.cumsum([0] + sizes)
    b4 = 2 if reduced else 3
    b6 = 3 if reduced else 5
    s4 = slice(offs[b4], offs[b4 + 1])
    s6 = slice(offs[b6], offs[b6 + 1])
    Ts = np.stack([np.asarray(v[f"T{j}"], dtype=float) for j in range(N)])
    zero = np.zeros((n, n))
    out = {}
    for p in ch.pbar_values:
        for i in range(N):
            M0 = assemble_thm3_lmi(i, 0, 0, p, pwa, v, np.block, reduced, corollary,
                                   Tj=zero, Tl=zero)
            M0 = 0.5 * (M0 + M0.T)
            d = M0.shape[0]
            stack = np.broadcast_to(M0, (N, N, d, d)).copy()
            stack[:, :, s4, s4] += Ts[:, None] / p
            stack[:, :, s6, s6] += Ts[None, :] / (1 - p)
            eig = np.linalg.eigvalsh(stack.reshape(N * N, d, d))[:, 0]
            out[("lmi", i, p)] = float(eig.min())
    for i in range(N):
        out[("T", i)] = min_eigenvalue(v[f"T{i}"])
        if not corollary:
            out[("R", i)] = min_eigenvalue(v[f"R{i}"])
            out[("G", i)] = min_eigenvalue(v[f"G{i}"])
    if not reduced:
        names = ("q", "h") if corollary else ("q", "r", "h")
        for name in names:
            out[(name,)] = float(v[name][0, 0])
    return out


def _thm3_problem(pwa, ch, opts, mode, escalation=None, corollary=False):
    reduced = opts.reduced
    N, n = len(pwa), pwa.n
    tie_u = escalation is not None and escalation.tie_u
    prob = LmiProblem()
    declare_synthesis_variables(prob, pwa, reduced, tie_u, corollary)
    add_positivity(prob, pwa, reduced, corollary)
    ps = ch.pbar_values
    if mode == "envelope":
        prob.variable("Tm", (n, n), symmetric=True)
        for j in range(N):
            prob.add(f"env{j}", lambda v, b, j=j: v[f"T{j}"] - v["Tm"], ">=")
        for i in range(N):
            for k, p in enumerate(ps):
                prob.add(f"lmi{i}p{k}", lambda v, b, i=i, p=p: assemble_thm3_lmi(
                    i, 0, 0, p, pwa, v, b, reduced, corollary, Tj=v["Tm"], Tl=v["Tm"]))
    elif mode == "diagonal":
        for i in range(N):
            for k, p in enumerate(ps):
                prob.add(f"lmi{i},{i},{i}p{k}", lambda v, b, i=i, p=p: assemble_thm3_lmi(
                    i, i, i, p, pwa, v, b, reduced, corollary))
    else:
        for i in range(N):
            for j in range(N):
                for l in range(N):
                    for k, p in enumerate(ps):
                        prob.add(f"lmi{i},{j},{l}p{k}",
                                 lambda v, b, i=i, j=j, l=l, p=p: assemble_thm3_lmi(
                                     i, j, l, p, pwa, v, b, reduced, corollary))
    if escalation is not None:
        nu = escalation.nu
        d1 = spectral_norm(pwa.D1)

        def l_floor(i):
            c = pwa[i]
            e = c.eps
            kbar = escalation.kappa + np.linalg.norm(c.a)
            ab = spectral_norm(c.A_bar)
            worst = 0.0
            for p in ps:
                val = (p * (2 * e * kbar + e * d1 + e ** 2)
                       + (1 - p) * (2 * e * ab + e * d1 + e ** 2)) / nu
                worst = max(worst, val)
            return worst + c.delta

        def g_floor(i):
            c = pwa[i]
            return c.eps * d1 / nu + c.delta

        add_escalation(prob, pwa, reduced, escalation, l_floor, g_floor)
    return prob


class Theorem3Synthesis(Synthesis):
    pass


class Corollary1Synthesis(Synthesis):
    pass


def synthesize_networked(system, partition: PolyhedralPartition | None,
                         ch: GilbertElliottChannel, opts: SynthesisOptions | None = None):
    """Gains making the lossy closed loop passive in conditional expectation.

    ``system`` is a nonlinear plant (refined on demand) or a fixed PWA
    approximation.  Returns a :class:`Theorem3Synthesis` or a
    :class:`SynthesisFailure`.
    """
    opts = opts or SynthesisOptions()
    if not isinstance(ch, GilbertElliottChannel):
        raise TypeError("a GilbertElliottChannel is required")
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
        out = solve_with_coupling(lambda mode: _thm3_problem(pwa, ch, opts, mode), opts,
                                  2 * N ** 3)
        if out.status != FEASIBLE:
            return {"status": out.status, "solution": out.solution,
                    "note": _lmi_note(out, reduced, LIFTED_NOTE_THM3), "cell": _worst_cell(out.solution)}
        audit_fn = lambda v: side_conditions_thm3(v, pwa, ch, reduced, opts.tolerance,  # noqa: E731
                                                  opts.max_cond)
        sol, aud = escalate(lambda esc: _thm3_problem(pwa, ch, opts, opts.coupling, esc),
                            audit_fn, pwa, opts, out.solution)
        if not aud.passed:
            return {"status": "side", "failing": aud.failing, "solution": sol}

        def make(pwa, history, refined):
            v = sol.assignment
            rep = replay_thm3(v, pwa, ch, reduced)
            return Theorem3Synthesis("theorem3", opts.formulation, pwa.partition, pwa, v,
                                     gains(v, N), aud, rep, refined, history, ch)

        return {"status": "certified", "make": make}

    return run_refinement("theorem3", solve_partition, build_pwa, partition, opts, can_refine)


def synthesize_pwa_networked(pwa: PwaApproximation, ch: GilbertElliottChannel,
                             opts: SynthesisOptions | None = None):
    """Gains for a PWA plant over the lossy channel (no residual terms)."""
    opts = opts or SynthesisOptions()
    reduced = opts.reduced
    if reduced:
        _require_linear_pieces(pwa)
    N = len(pwa)
    out = solve_with_coupling(
        lambda mode: _thm3_problem(pwa, ch, opts, mode, corollary=True), opts, 2 * N ** 3)
    if out.status != FEASIBLE:
        return SynthesisFailure(_lmi_note(out, reduced, LIFTED_NOTE_COR), _worst_cell(out.solution),
                                pwa.partition, pwa, [], out.solution)
    v = out.solution.assignment
    rep = replay_thm3(v, pwa, ch, reduced, corollary=True)
    audit = SideConditionAudit([])
    return Corollary1Synthesis("corollary1", opts.formulation, pwa.partition, pwa, v, gains(v, N),
                     audit, rep, False, [], ch)


def cross_replay(cert: Synthesis, pwa: PwaApproximation, ch: GilbertElliottChannel,
                 target: str) -> float:
    """Smallest eigenvalue of the ``target`` inequality under ``cert``'s values.

    ``target`` is ``"theorem3"`` or ``"corollary1"``.  Variables that the
    certificate does not carry (``R``, ``G``, ``r`` for a PWA certificate)
    are set to zero, which leaves the matrix unchanged.
    """
    reduced = cert.formulation == "reduced"
    v = dict(cert.values)
    n, s = pwa.n, pwa.s
    if target == "theorem3":
        for i in range(len(pwa)):
            v.setdefault(f"R{i}", np.zeros((n, n)))
            v.setdefault(f"G{i}", np.zeros((s, s)))
        if not reduced:
            v.setdefault("r", np.zeros((1, 1)))
        rep = replay_thm3(v, pwa, ch, reduced, corollary=False)
    elif target == "corollary1":
        rep = replay_thm3(v, pwa, ch, reduced, corollary=True)
    else:
        raise ValueError("target must be 'theorem3' or 'corollary1'")
    return min(val for key, val in rep.items() if key[0] == "lmi")
