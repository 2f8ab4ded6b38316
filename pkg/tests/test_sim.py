import csv
import io

import numpy as np
import pytest
from scipy.signal import place_poles

from pwapass.approx import approximate
from pwapass.netpassify import GilbertElliottChannel
from pwapass.passivity import check_passivity
from pwapass.model import Cell, NonlinearSystem, PolyhedralPartition, locate
from pwapass.sim import (SimulationConfig, SimulationTrace, disturbance_signal,
                         dissipation_report, example_disturbance, run, trace_to_csv)

from conftest import DISTURBANCE, X0

CH = GilbertElliottChannel(0.95, 0.04)


def synthetic_trace(gaps, cond=None):
    K = len(gaps)
    z = np.zeros((K, 1))
    return SimulationTrace(x=np.zeros((K, 1)), cell=np.zeros(K, int), u_prime=z, v=np.ones(K, np.int8),
                           u=z, w=z, z=z, V=np.zeros(K), gap=np.asarray(gaps, float),
                           cond_gap=np.full(K, np.nan) if cond is None else np.asarray(cond, float),
                           pbar=np.full(K, np.nan), x_final=np.zeros(1),
                           has_channel=cond is not None)


def stabilizing_gains(N, poles=(0.2, 0.3, 0.4)):
    """One pole-placement gain for the linearization at the origin, used in every cell."""
    A0 = np.array([[4.0, 1, 0], [1, 0, 1], [1, 0, 0]])
    B = np.array([[2.0], [0], [1]])
    K = -place_poles(A0, B, poles).gain_matrix
    return [K] * N


def quadratic_storage(x, i):
    return 0.5 * float(np.dot(x, x))


def test_disturbance_sources():
    w = disturbance_signal(example_disturbance(), 1, 100)
    k = np.arange(100)
    assert np.allclose(w[:, 0], 0.02 * np.sin(0.2 * np.pi * k) * np.exp(-k / 25), atol=1e-17)
    assert np.array_equal(disturbance_signal("zero", 2, 5), np.zeros((5, 2)))
    a = disturbance_signal({"noise": 0.1, "seed": 2}, 1, 50)
    assert np.array_equal(a, disturbance_signal({"noise": 0.1, "seed": 2}, 1, 50))
    assert np.all(np.abs(a) <= 0.1)
    with pytest.raises(ValueError):
        disturbance_signal([1.0, 2.0], 1, 5)
    with pytest.raises(ValueError):
        disturbance_signal("sin(k)", 2, 5)


def test_equilibrium(system, part26, rng):
    tr = run(system, SimulationConfig([0, 0, 0], 30, None, gains=stabilizing_gains(26),
                                      storage=quadratic_storage, partition=part26))
    assert tr.status == "complete" and len(tr) == 30
    assert np.all(tr.x == 0) and np.all(tr.gap == 0)
    assert dissipation_report(tr).passed


def test_recurrence_uses_true_dynamics(system, part26, rng):
    gains = stabilizing_gains(26)
    tr = run(system, SimulationConfig(X0, 20, DISTURBANCE, gains=gains, partition=part26))
    for k in range(len(tr) - 1):
        x, u, w = tr.x[k], tr.u[k], tr.w[k]
        assert tr.cell[k] == locate(part26, x)
        assert np.allclose(tr.u_prime[k], gains[tr.cell[k]] @ x, rtol=0, atol=0)
        xn, z = system.step(x, u, w)
        assert np.array_equal(tr.x[k + 1], xn)
        assert np.array_equal(tr.z[k], z)


def test_zero_input_law(system, part26, rng):
    tr = run(system, SimulationConfig(X0, 100, DISTURBANCE, gains=stabilizing_gains(26),
                                      channel=CH, channel_seed=7, partition=part26))
    lost = tr.v == 0
    assert lost.any()
    assert np.all(tr.u[lost] == 0.0)
    assert np.array_equal(tr.u[~lost], tr.u_prime[~lost])


def test_determinism(system, part26, rng):
    cfg = dict(x0=X0, horizon=60, disturbance={"noise": 0.02, "seed": 5},
               gains=stabilizing_gains(26), channel=CH, channel_seed=3,
               storage=quadratic_storage, partition=part26)
    a = trace_to_csv(run(system, SimulationConfig(**cfg)))
    b = trace_to_csv(run(system, SimulationConfig(**cfg)))
    assert a == b


def test_exit_truncates(system, part26):
    tr = run(system, SimulationConfig([0.8, 0.4, 0.4], 100, None, partition=part26))
    assert tr.status == "exited"
    assert tr.exit_step == len(tr) < 100
    with pytest.raises(ValueError, match="outside"):
        run(system, SimulationConfig([0.9, 0, 0], 5, None, partition=part26))


def test_gain_count_checked(system, part26, rng):
    with pytest.raises(ValueError):
        run(system, SimulationConfig(X0, 5, None, gains=stabilizing_gains(3), partition=part26))


def test_conditional_gap_is_two_branch_expectation(system, part26, rng):
    gains = stabilizing_gains(26)
    # from X0 the open-loop branch leaves the region: the gap is undefined there
    tr = run(system, SimulationConfig(X0, 3, DISTURBANCE, gains=gains, channel=CH,
                                      channel_seed=1, storage=quadratic_storage,
                                      partition=part26))
    assert np.isnan(tr.cond_gap[0])
    tr = run(system, SimulationConfig([0.05, 0.02, -0.02], 40, DISTURBANCE, gains=gains,
                                      channel=CH, channel_seed=1, storage=quadratic_storage,
                                      partition=part26))
    for k in (0, 5, 17):
        x, w = tr.x[k], tr.w[k]
        p = CH.stationary if k == 0 else (0.95 if tr.v[k - 1] == 0 else 0.96)
        assert tr.pbar[k] == pytest.approx(p)
        up = gains[tr.cell[k]] @ x
        expect = 0.0
        for prob, u in ((p, up), (1 - p, np.zeros(1))):
            xn, z = system.step(x, u, w)
            expect += prob * (quadratic_storage(xn, 0) - float(z @ w))
        expect -= quadratic_storage(x, 0)
        assert tr.cond_gap[k] == pytest.approx(expect, abs=1e-15)


def test_report_examples():
    rep = dissipation_report(synthetic_trace(np.zeros(10)))
    assert rep.max_gap == 0 and rep.violations == 0
    g = np.full(10, -1e-3)
    g[6] = 0.5
    rep = dissipation_report(synthetic_trace(g))
    assert rep.violations == 1 and rep.step_of_max == 6 and rep.violation_steps == [6]
    rep = dissipation_report(synthetic_trace(np.zeros(4), cond=[0, 2e-9, np.nan, 0]))
    assert rep.series == "cond_gap" and rep.violations == 1 and rep.step_of_max == 1
    with pytest.raises(ValueError):
        dissipation_report(synthetic_trace([]))


def test_csv_layout(system, part26, rng):
    tr = run(system, SimulationConfig(X0, 10, DISTURBANCE, gains=stabilizing_gains(26),
                                      storage=quadratic_storage, partition=part26))
    text = trace_to_csv(tr)
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["k", "x1", "x2", "x3", "cell", "u_prime", "v", "u", "w", "z", "V",
                       "gap", "cond_gap"]
    assert len(rows) == 11
    assert float(rows[3][1]) == tr.x[2, 0]     # 17 digits round-trip exactly
    assert rows[1][-1] == "nan"


def test_theorem1_storage_dissipates():
    s = NonlinearSystem.from_strings(["0.5*x1"], ["0"], [1], [0], [0], [1])
    p = PolyhedralPartition([Cell(0, np.zeros((0, 1)), np.zeros(0))], [-1], [1])
    cert = check_passivity(approximate(s, p, samples=1000))
    assert cert.certified
    tr = run(s, SimulationConfig([0.8], 50, {"noise": 0.1, "seed": 3}, storage=cert,
                                 partition=p))
    assert tr.status == "complete"
    assert dissipation_report(tr).passed
