import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evbid.scheduler import (GapConstants, QueueState, SchedulerParams, delay_bound, gap_bound,
                             solve_p2, solve_p2_linear, update_q, update_z)


def grid_p2(price, s, cap, V, steps=100_000):
    """Brute-force minimiser of (V*price - s) x + x^2/2 on a uniform grid of [0, cap]."""
    x = np.linspace(0.0, cap, steps + 1)
    return x[np.argmin((V * price - s) * x + 0.5 * x * x)]


def params(G=1, V=2.0, alpha=1.0, R=12):
    return SchedulerParams(V, [alpha] * G, [R] * G)


def test_update_q_examples():
    assert update_q(0.0, 3.0, 0.0) == 0.0
    assert update_q(5.0, 2.0, 1.0) == 4.0
    assert update_q(1.0, 3.0, 2.0) == 2.0


def test_update_z_examples():
    assert update_z(2.0, 0.0, 1.0, 6.0, 12) == 1.0
    assert update_z(2.0, 1.0, 3.0, 6.0, 12) == 0.0
    assert update_z(0.0, 1.0, 0.0, 6.0, 12) == 0.5


def test_params_validation():
    with pytest.raises(ValueError):
        SchedulerParams(0.0, [1.0], [12])
    with pytest.raises(ValueError):
        SchedulerParams(1.0, [0.0], [12])
    with pytest.raises(ValueError):
        SchedulerParams(1.0, [1.0], [0])


def test_solve_p2_examples():
    q = QueueState([10.0], [0.0])
    assert solve_p2(4.0, q, [4.0], params())[0] == pytest.approx(2.0)
    assert solve_p2(2.0, q, [4.0], params())[0] == pytest.approx(4.0)
    assert solve_p2(1.0, QueueState.empty(3), [4.0, 2.0, 1.0], params(3)).tolist() == [0.0, 0.0, 0.0]
    for price in (2.0, 4.0, 4.9, 6.0):
        assert solve_p2(price, q, [4.0], params())[0] == pytest.approx(grid_p2(price, 10.0, 4.0, 2.0), abs=4e-5)
    with pytest.raises(ValueError):
        solve_p2(-1.0, q, [4.0], params())


@given(st.floats(0, 50), st.floats(0, 50), st.floats(0, 20), st.floats(0, 20), st.floats(0.1, 10))
@settings(max_examples=200, deadline=None)
def test_solve_p2_monotone(s, extra, p1, p2, V):
    caps = [7.0]
    lo, hi = sorted([p1, p2])
    a = solve_p2(lo, QueueState([s], [0.0]), caps, params(V=V))[0]
    b = solve_p2(hi, QueueState([s], [0.0]), caps, params(V=V))[0]
    c = solve_p2(lo, QueueState([s], [extra]), caps, params(V=V))[0]
    assert b <= a + 1e-12
    assert c >= a - 1e-12
    assert 0.0 <= a <= 7.0


@given(st.lists(st.tuples(st.floats(0, 1e4), st.floats(0, 1e3), st.floats(0, 1e3), st.floats(0, 1e3)),
                min_size=1, max_size=30))
@settings(max_examples=100, deadline=None)
def test_queues_stay_nonnegative(steps):
    q = QueueState.empty(1)
    prm = params(alpha=3.0)
    for x, a, _, _ in steps:
        q.advance(np.array([x]), np.array([a]), prm)
        assert q.q[0] >= 0 and q.z[0] >= 0
        assert q.q_max_seen[0] >= q.q[0] and q.z_max_seen[0] >= q.z[0]


def test_linear_response_is_bang_bang():
    q = QueueState([10.0, 6.0, 2.0], [0.0, 0.0, 0.0])
    x = solve_p2_linear(2.5, q, [4.0, 2.0, 1.0], params(3))
    assert x.tolist() == [4.0, 2.0, 0.0]
    # a group exactly at its threshold absorbs the cleared remainder
    x = solve_p2_linear(3.0, q, [4.0, 2.0, 1.0], params(3), total=5.0)
    assert x.tolist() == [4.0, 1.0, 0.0]


def test_delay_bound_examples():
    q = QueueState.empty(1)
    assert delay_bound(0, q, params()) == 0.0
    q.q_max_seen[0], q.z_max_seen[0] = 20.0, 4.0
    assert delay_bound(0, q, params(R=12)) == 288.0
    assert delay_bound(0, q, params(R=12, alpha=2.0)) == 144.0


def test_gap_bound_scaling():
    zero = GapConstants(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2))
    prm = SchedulerParams(2.0, [1.0, 1.0], [12, 12])
    # the (alpha/R)^2 term is all that remains with zero constants
    assert gap_bound(prm, zero) == pytest.approx(0.5 * 2 * (1 / 12) ** 2 / 2.0)
    c = GapConstants(np.array([3.0, 1.0]), np.array([10.0, 5.0]), np.array([2.0, 1.0]), np.array([7.0, 4.0]))
    assert gap_bound(prm, c) == pytest.approx(2 * gap_bound(SchedulerParams(4.0, [1.0, 1.0], [12, 12]), c))
