from dataclasses import replace

import numpy as np
import pytest

from pwapass.approx import PwaApproximation, approximate
from pwapass.model import Cell, PolyhedralPartition
from pwapass.netpassify import (LIFTED_NOTE_COR, LIFTED_NOTE_THM3, Corollary1Synthesis,
                                GilbertElliottChannel, assemble_thm3_lmi, cross_replay,
                                replay_thm3, sample_channel, side_conditions_thm3,
                                synthesize_networked, synthesize_pwa_networked)
from pwapass.passify import SynthesisFailure, SynthesisOptions

EXAMPLE_CHANNEL = GilbertElliottChannel(0.95, 0.04)


# ------------------------------------------------------------------ channel

@pytest.mark.parametrize("alpha, beta", [(0.0, 0.5), (1.0, 0.5), (0.5, 0.0), (0.5, 1.0),
                                         (1.0, 0.0), (-0.1, 0.2)])
def test_degenerate_channels_rejected(alpha, beta):
    with pytest.raises(ValueError, match="deterministic"):
        GilbertElliottChannel(alpha, beta)


def test_near_perfect_channel():
    v = sample_channel(GilbertElliottChannel(0.999999, 0.000001), 100_000, seed=4)
    assert 1 - v.mean() <= 1e-4


def test_example_channel_statistics():
    ch = EXAMPLE_CHANNEL
    assert ch.stationary == pytest.approx(0.95 / 0.99)
    assert ch.stationary == pytest.approx(0.959596, abs=1e-6)
    v = sample_channel(ch, 100_000, seed=11)
    assert abs(v.mean() - ch.stationary) <= 1e-2
    prev, nxt = v[:-1], v[1:]
    assert abs(nxt[prev == 0].mean() - 0.95) <= 1e-2
    assert abs(nxt[prev == 1].mean() - 0.96) <= 1e-2


def test_channel_determinism_and_pbar():
    a = sample_channel(EXAMPLE_CHANNEL, 500, seed=3)
    b = sample_channel(EXAMPLE_CHANNEL, 500, seed=3)
    assert np.array_equal(a, b) and a.dtype == np.int8
    assert not np.array_equal(a, sample_channel(EXAMPLE_CHANNEL, 500, seed=4))
    assert EXAMPLE_CHANNEL.pbar_values == (0.95, pytest.approx(0.96))
    assert EXAMPLE_CHANNEL.pbar(0) == 0.95 and EXAMPLE_CHANNEL.pbar(1) == pytest.approx(0.96)
    assert EXAMPLE_CHANNEL.pbar(None) == EXAMPLE_CHANNEL.stationary
    with pytest.raises(ValueError):
        sample_channel(EXAMPLE_CHANNEL, 0, seed=0)


# ------------------------------------------------------------------ assembly

def one_cell(A=0.5, B1=1.0, C=1.0, B2=0.0, D1=0.0, D2=1.0, eps=0.0, delta=0.0):
    p = PolyhedralPartition([Cell(0, np.zeros((0, 1)), np.zeros(0))], [-1], [1])
    pwa = PwaApproximation.from_affine(p, [[[A]]], [[0]], [[C]], [[0]], [B1], [D1], [B2], [D2])
    return replace(pwa, cells=(replace(pwa[0], eps=eps, delta=delta),))


def scalar_values(T=2.0, U=1.5, W=-0.3, R=0.4, G=0.2, q=0.7, r=0.1, h=0.9):
    v = dict(T0=T, U0=U, W0=W, R0=R, G0=G, q=q, r=r, h=h)
    return {k: np.array([[x]]) for k, x in v.items()}


def test_scalar_lifted_assembly_by_hand():
    A, B1, C, B2, D1, D2 = 0.5, 1.0, 1.0, 0.3, 0.2, 1.0
    T, U, W, R, G, q, r, h = 2.0, 1.5, -0.3, 0.4, 0.2, 0.7, 0.1, 0.9
    p = 0.95
    M = assemble_thm3_lmi(0, 0, 0, p, one_cell(A, B1, C, B2, D1, D2), scalar_values())
    o13 = U * C + p * W * B2
    o14 = U * A + W * B1
    o16 = U * A
    hand = np.array([
        [2 * U - T - R, 0, o13, o14, 0, o16, 0],
        [0, 2 * q - (h + r), 0, 0, q, 0, q],
        [o13, 0, 2 * D2 - G, D1, 0, D1, 0],
        [o14, 0, D1, T / p, 0, 0, 0],
        [0, q, 0, 0, h / p, 0, 0],
        [o16, 0, D1, 0, 0, T / (1 - p), 0],
        [0, q, 0, 0, 0, 0, h / (1 - p)],
    ])
    assert np.allclose(M, hand, atol=1e-12)


def test_scalar_corollary_assembly_by_hand():
    v = scalar_values()
    M = assemble_thm3_lmi(0, 0, 0, 0.6, one_cell(), v, reduced=True, corollary=True)
    hand = np.array([[3 - 2, 1.5, 0.75 - 0.3, 0.75],
                     [1.5, 2.0, 0, 0],
                     [0.45, 0, 2 / 0.6, 0],
                     [0.75, 0, 0, 2 / 0.4]])
    assert np.allclose(M, hand, atol=1e-12)


def test_o13_independent_of_pbar_without_b2():
    pwa = one_cell(B2=0.0)
    v = scalar_values()
    a = assemble_thm3_lmi(0, 0, 0, 0.3, pwa, v)
    b = assemble_thm3_lmi(0, 0, 0, 0.8, pwa, v)
    assert a[0, 2] == b[0, 2]


@pytest.mark.parametrize("pbar", [0.0, 1.0])
def test_pbar_bounds(pbar):
    with pytest.raises(ValueError):
        assemble_thm3_lmi(0, 0, 0, pbar, one_cell(), scalar_values())


def test_example_cell_assembly(system, part30):
    pwa = approximate(system, part30, samples=1000)
    i = next(k for k in range(len(part30)) if part30[k].interval == (0.0, 0.07))
    n, s = 3, 1
    v = {f"T{i}": np.eye(n), f"U{i}": np.eye(n), f"R{i}": np.eye(n),
         f"W{i}": np.ones((1, n)), f"G{i}": np.eye(s), "q": np.eye(1), "r": np.eye(1),
         "h": np.eye(1)}
    M = assemble_thm3_lmi(i, i, i, 0.95, pwa, v)
    # blocks n, 1, s, n, 1, n, 1
    assert M.shape == (3 * n + s + 3, 3 * n + s + 3)
    assert np.allclose(M, M.T)


def test_lifted_rows_schur_complement():
    """Rows (2, 5, 7) give 2q - h - r - q^2 p/h - q^2 (1-p)/h = -(q-h)^2/h - r."""
    rng = np.random.default_rng(8)
    for _ in range(100):
        q, r, h = rng.uniform(1e-3, 5, 3)
        p = rng.uniform(0.01, 0.99)
        sub = np.array([[2 * q - h - r, q, q], [q, h / p, 0], [q, 0, h / (1 - p)]])
        comp = sub[0, 0] - sub[0, 1:] @ np.linalg.solve(sub[1:, 1:], sub[1:, 0])
        assert comp == pytest.approx(-(q - h) ** 2 / h - r, rel=1e-9, abs=1e-12)
        assert np.linalg.eigvalsh(sub)[0] < 0


# ------------------------------------------------------------------ side conditions

def test_rho_vanish_without_residual():
    aud = side_conditions_thm3(scalar_values(), one_cell(), EXAMPLE_CHANNEL)
    assert all(t == 0.0 for t in aud.cells[0].terms)
    assert aud.passed


def test_rho3_by_substitution():
    ch = GilbertElliottChannel(0.01, 0.04)     # pbar values 0.01 and 0.96
    pwa = one_cell(eps=0.01, delta=0.03)
    T = 2.0
    aud = side_conditions_thm3(scalar_values(T=T, W=0.9), pwa, ch)
    rho = aud.cells[0].terms
    # the closed loop (0.5 + 0.6) outweighs the open loop (0.5), so pbar = 0.96 maximises
    K = 0.9 / 1.5
    sums = {}
    for p in ch.pbar_values:
        sums[p] = (2 * p * 0.01 * abs(0.5 + K) / T + p * 1e-4 / T
                   + 2 * (1 - p) * 0.01 * 0.5 / T + (1 - p) * 1e-4 / T + 0.03)
    assert max(sums, key=sums.get) == pytest.approx(0.96)
    assert rho[2] == pytest.approx(0.96 * 1e-4 / T, rel=1e-12)
    assert rho[6] == 0.03


def test_rho7_independent_of_channel():
    pwa = one_cell(eps=0.01, delta=0.07)
    for ch in (EXAMPLE_CHANNEL, GilbertElliottChannel(0.3, 0.6)):
        assert side_conditions_thm3(scalar_values(), pwa, ch).cells[0].terms[6] == 0.07


# ------------------------------------------------------------------ synthesis

def two_cell_pwa(A=(0.6, 0.4), B1=1.0, C=1.0, D2=1.0):
    p = PolyhedralPartition([Cell(0, [[1.0]], [0.0]), Cell(1, [[-1.0]], [0.0])], [-1], [1])
    return PwaApproximation.from_affine(p, [[[a]] for a in A], [[0], [0]], [[C], [C]],
                                        [[0], [0]], [B1], [0], [0], [D2])


def test_corollary_reduced_certified_and_cross_replay():
    pwa = two_cell_pwa()
    res = synthesize_pwa_networked(pwa, EXAMPLE_CHANNEL, SynthesisOptions(formulation="reduced"))
    assert isinstance(res, Corollary1Synthesis)
    assert res.min_replay_margin() >= -1e-7
    assert res.gain_consistency() <= 1e-9
    margin3 = cross_replay(res, pwa, EXAMPLE_CHANNEL, "theorem3")
    assert margin3 == pytest.approx(cross_replay(res, pwa, EXAMPLE_CHANNEL, "corollary1"),
                                    abs=1e-12)
    assert margin3 >= -1e-7


def test_theorem3_on_exact_pwa_matches_corollary():
    """With eps = delta = 0 a Theorem 3 certificate also certifies the PWA conditions."""
    pwa = two_cell_pwa()
    res = synthesize_networked(pwa, None, EXAMPLE_CHANNEL, SynthesisOptions(formulation="reduced"))
    assert res.certified
    assert cross_replay(res, pwa, EXAMPLE_CHANNEL, "corollary1") >= -1e-7


def test_lifted_theorem3_fails_with_note():
    pwa = two_cell_pwa()
    res = synthesize_networked(pwa, None, EXAMPLE_CHANNEL, SynthesisOptions(formulation="lifted"))
    assert isinstance(res, SynthesisFailure)
    assert LIFTED_NOTE_THM3 in res.reason


def test_cross_replay_rejects_unknown_target():
    pwa = two_cell_pwa()
    res = synthesize_pwa_networked(pwa, EXAMPLE_CHANNEL, SynthesisOptions(formulation="reduced"))
    with pytest.raises(ValueError):
        cross_replay(res, pwa, EXAMPLE_CHANNEL, "theorem2")


def test_networked_requires_channel(system, part30):
    with pytest.raises(TypeError):
        synthesize_networked(system, part30, (0.95, 0.04))


# ------------------------------------------------------------------ scalar grid oracle

GRID_CH = GilbertElliottChannel(0.6, 0.3)      # pbar values 0.6 and 0.7
RES = 0.05
BOX = 2.0


def corollary_grid(pwa):
    """Best min eigenvalue over (T, U, W) on a grid, both pbar values, one cell."""
    c = pwa[0]
    A, C = c.A[0, 0], c.C[0, 0]
    B1, B2, D1, D2 = (float(pwa.B1[0, 0]), float(pwa.B2[0, 0]), float(pwa.D1[0, 0]),
                      float(pwa.D2[0, 0]))
    T = np.arange(RES, BOX + RES / 2, RES)
    UW = np.arange(-BOX, BOX + RES / 2, RES)
    T, U, W = np.meshgrid(T, UW, UW, indexing="ij")
    worst = np.full(T.shape, np.inf)
    for p in GRID_CH.pbar_values:
        M = np.zeros(T.shape + (4, 4))
        M[..., 0, 0] = 2 * U - T
        M[..., 0, 1] = M[..., 1, 0] = U * C + p * W * B2
        M[..., 0, 2] = M[..., 2, 0] = U * A + W * B1
        M[..., 0, 3] = M[..., 3, 0] = U * A
        M[..., 1, 1] = 2 * D2
        M[..., 1, 2] = M[..., 2, 1] = D1
        M[..., 1, 3] = M[..., 3, 1] = D1
        M[..., 2, 2] = T / p
        M[..., 3, 3] = T / (1 - p)
        worst = np.minimum(worst, np.linalg.eigvalsh(M)[..., 0])
    # min eig moves by at most sum_k ||dM/dx_k|| |dx_k| and |dx_k| <= RES / 2
    lip = 0.0
    for var in range(3):
        worst_norm = 0.0
        for p in GRID_CH.pbar_values:
            D = np.zeros((4, 4))
            if var == 0:
                D[0, 0], D[2, 2], D[3, 3] = -1.0, 1 / p, 1 / (1 - p)
            elif var == 1:
                D[0, 0] = 2.0
                D[0, 1:] = D[1:, 0] = (C, A, A)
            else:
                D[0, 1:] = D[1:, 0] = (p * B2, B1, 0.0)
            worst_norm = max(worst_norm, np.linalg.norm(D, 2))
        lip += worst_norm * RES / 2
    return float(worst.max()), lip


def test_corollary_matches_scalar_grid_oracle():
    rng = np.random.default_rng(21)
    decided = certified = 0
    for _ in range(20):
        A = rng.uniform(-1.5, 1.5)
        p = PolyhedralPartition([Cell(0, np.zeros((0, 1)), np.zeros(0))], [-1], [1])
        pwa = PwaApproximation.from_affine(p, [[[A]]], [[0]], [[rng.uniform(-1, 1)]], [[0]],
                                           [rng.uniform(-1, 1)], [rng.uniform(-0.5, 0.5)],
                                           [rng.uniform(-0.5, 0.5)], [rng.uniform(-0.3, 1.0)])
        best, lip = corollary_grid(pwa)
        res = synthesize_pwa_networked(pwa, GRID_CH, SynthesisOptions(
            formulation="reduced", solver={"box": BOX}))
        if best > 1e-7:
            assert res.certified
            decided += 1
            certified += 1
        elif best < -lip:
            assert not res.certified
            decided += 1
        if res.certified:
            assert res.min_replay_margin() >= -1e-7
    assert decided >= 14
    assert 4 <= certified <= decided - 4
