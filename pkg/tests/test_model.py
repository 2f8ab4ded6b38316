import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwapass.model import (Cell, NonlinearSystem, OutOfRegionError, PolyhedralPartition,
                           grid_partition, lift, locate)

from conftest import BP26, BP30, example_system


def test_system_dimensions(system):
    assert (system.n, system.m, system.s) == (3, 1, 1)
    assert system.B1.shape == (3, 1) and system.D1.shape == (3, 1)
    assert system.B2.shape == (1, 1) and system.D2.shape == (1, 1)


def test_system_step_matches_definition(system):
    x = np.array([0.2, -0.1, 0.3])
    x_next, z = system.step(x, [0.5], [0.01])
    expected = np.array([4 * np.sin(0.2) - 0.1, 0.2 + 0.3, 0.2]) + 0.5 * np.array([2, 0, 1]) \
        + 0.01 * np.array([1, 0.5, 0])
    assert np.allclose(x_next, expected, rtol=0, atol=1e-15)
    assert z == pytest.approx([0.2 + 0.05 + 0.02], abs=1e-15)


def test_system_rejects_nonzero_at_origin():
    with pytest.raises(ValueError, match="origin|f\\(0\\)"):
        NonlinearSystem.from_strings(["x1 + 1"], ["x1"], [1], [0], [0], [1])
    with pytest.raises(ValueError, match="origin|h\\(0\\)"):
        NonlinearSystem.from_strings(["x1"], ["cos(x1)"], [1], [0], [0], [1])


def test_system_rejects_bad_shapes():
    with pytest.raises(ValueError):
        NonlinearSystem.from_strings(["x1", "x2"], ["x1"], [[1, 2, 3]], [0, 0], [0], [1])


def test_lift():
    xb = lift([0.5, -2.0])
    assert xb.tolist() == [0.5, -2.0, 1.0]


@pytest.mark.parametrize("bps, count", [(BP26, 26), (BP30, 30)])
def test_grid_partition_counts(bps, count):
    assert len(grid_partition(0, bps, [-1, -1, -1], [1, 1, 1])) == count


def test_small_grid_origin_flags():
    p = grid_partition(0, [-0.13, 0, 0.13], [-1, -1, -1], [1, 1, 1])
    assert len(p) == 2
    assert p[1].contains_origin
    assert p[0].contains_origin
    for c in p.cells:
        assert np.all(c.sprocedure_rows[:, -1] == 0)
        assert c.E.shape == (2, 3)


def test_zero_inserted_when_straddling():
    p = grid_partition(0, [-0.5, 0.5], [-1], [1])
    assert [c.interval for c in p.cells] == [(-0.5, 0.0), (0.0, 0.5)]


def test_unsorted_breakpoints_rejected():
    with pytest.raises(ValueError):
        grid_partition(0, [0, 0.2, 0.1], [-1], [1])


def test_locate_examples(part26):
    assert part26.describe(locate(part26, [0.05, 0.2, -0.3])).endswith("0 <= x1 <= 0.13")
    assert part26[locate(part26, [0.0, 0.0, 0.0])].contains_origin
    # shared face: the lower index wins
    assert locate(part26, [0.13, 0.0, 0.0]) == 13
    assert locate(part26, [0.1300000001, 0.0, 0.0]) == 14


def test_locate_out_of_region(part26):
    with pytest.raises(OutOfRegionError):
        locate(part26, [0.9, 0, 0])
    with pytest.raises(OutOfRegionError):
        locate(part26, [0.0, 0.6, 0])


@settings(max_examples=200, deadline=None)
@given(st.floats(-0.82, 0.82), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_locate_total_and_correct(x1, x2, x3):
    p = grid_partition(0, BP26, [-0.82, -0.5, -0.5], [0.82, 0.5, 0.5])
    x = np.array([x1, x2, x3])
    i = locate(p, x)
    assert p[i].contains(x)
    assert not any(p[k].contains(x) for k in range(i))


@pytest.mark.parametrize("bps", [BP26, BP30])
def test_coverage_and_disjointness(bps):
    p = grid_partition(0, bps, [-1, -0.5, -0.5], [1, 0.5, 0.5])
    stats = p.check_coverage(10_000, seed=1)
    assert stats["uncovered"] == 0
    assert stats["overlapping"] == 0


def test_halfspace_rows_separate_samples(part30, rng):
    pts = part30.sample_box(5000, rng)
    for c in part30.cells[::5]:
        inside = c.contains(pts)
        lifted = np.hstack([pts, np.ones((len(pts), 1))]) @ c.E_bar.T
        assert np.array_equal(inside, np.all(lifted >= -1e-12, axis=1))
        lo, hi = c.interval
        assert np.array_equal(inside, (pts[:, 0] >= lo) & (pts[:, 0] <= hi))


def test_sample_cell_stays_inside(part26, rng):
    for i in (0, 12, 13, 25):
        pts = part26.sample_cell(i, 500, rng)
        assert len(pts) == 500
        assert np.all(part26[i].contains(pts, tol=0.0))


def test_bisect_preserves_cover_and_parents(part26):
    new, parent = part26.bisect([0, 13])
    assert len(new) == 28
    assert parent[0] == parent[1] == 0 and parent[14] == parent[15] == 13
    assert new[14].interval == (0.0, 0.065) and new[14].contains_origin
    assert new.check_coverage(5000, seed=2)["uncovered"] == 0


def test_explicit_cells():
    cells = [Cell(0, [[1.0]], [0.0]), Cell(1, [[-1.0]], [0.0])]
    p = PolyhedralPartition(cells, [-1.0], [1.0])
    assert p.origin_cells == [0, 1]
    assert locate(p, [0.0]) == 0 and locate(p, [-0.5]) == 1
    with pytest.raises(ValueError):
        p.bisect([0])


def test_example_system_fixture_is_consistent():
    s = example_system()
    x = np.array([0.3, 0.1, -0.1])
    assert np.allclose(s.eval_f(x), [4 * np.sin(0.3) + 0.1, 0.2, 0.3])
    assert s.eval_h(x) == pytest.approx([0.3])
