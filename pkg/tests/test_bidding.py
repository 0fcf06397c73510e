import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evbid.bidding import (LINEAR, QUADRATIC, BidCurve, breakpoints, build_bid_curve,
                           build_linear_bid_curve, inverse_demand, linear_pieces, sample_curve)
from evbid.scheduler import QueueState, SchedulerParams, solve_p2


def example():
    return QueueState([10.0], [0.0]), np.array([4.0]), 2.0


def response(price, queues, caps, V):
    """Aggregate charging at a price, straight from the per-slot closed form."""
    G = len(caps)
    return float(solve_p2(max(price, 0.0), queues, caps, SchedulerParams(V, [1.0] * G, [1] * G)).sum())


def marginal_oracle(x, queues, caps, V):
    """Price at which the aggregate response equals x (bisection on the closed form)."""
    lo, hi = 0.0, float(np.max(queues.backlog)) / V + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if response(mid, queues, caps, V) > x:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def quadrature_oracle(queues, caps, V, per_piece=40):
    """Trapezoidal integral of the inverse response on a grid refined between its kinks.

    The kinks come from evaluating the response at every breakpoint price; on
    each piece the integrand is sampled inside and extended to the ends, so
    jumps of the marginal at plateaus do not smear into neighbouring pieces.
    """
    s = queues.backlog
    prices = np.concatenate([[0.0], (s - caps) / V, s / V])
    top = response(0.0, queues, caps, V)
    knots = sorted({min(max(response(p, queues, caps, V), 0.0), top) for p in prices} | {0.0, top})
    xs, us = [0.0], [0.0]
    for a, b in zip(knots, knots[1:]):
        if b - a <= 1e-12 * (1 + top):
            continue
        inner = a + (b - a) * (np.arange(1, per_piece) / per_piece)
        h_in = np.array([marginal_oracle(x, queues, caps, V) for x in inner])
        slope = (h_in[-1] - h_in[0]) / (inner[-1] - inner[0]) if len(inner) > 1 else 0.0
        grid = np.concatenate([[a], inner, [b]])
        h = np.concatenate([[h_in[0] - slope * (inner[0] - a)], h_in, [h_in[-1] + slope * (b - inner[-1])]])
        piece = np.concatenate([[0.0], np.cumsum(0.5 * (h[1:] + h[:-1]) * np.diff(grid))])
        xs.extend(grid[1:])
        us.extend(us[-1] + piece[1:])
    return np.array(xs), np.array(us), top


def random_state(rng, G=None):
    G = int(rng.integers(1, 7)) if G is None else G
    q = rng.uniform(0, 60, G) * (rng.random(G) < 0.85)
    z = rng.uniform(0, 10, G) * (rng.random(G) < 0.5)
    caps = rng.choice([0.0, 3.0, 7.0, 14.0, 25.0], G)
    if rng.random() < 0.3 and G > 1:  # identical groups
        q[1], z[1], caps[1] = q[0], z[0], caps[0]
    return QueueState(q, z), caps, float(rng.uniform(0.5, 8.0))


def test_breakpoints_examples():
    q, caps, V = example()
    assert breakpoints(q, caps, V) == [(3.0, "lower"), (5.0, "upper")]
    zero = breakpoints(QueueState([4.0], [0.0]), [0.0], 2.0)
    assert zero[0][0] == zero[1][0]
    twin = breakpoints(QueueState([10.0, 10.0], [0.0, 0.0]), [4.0, 4.0], 2.0)
    assert [p for p, _ in twin] == [3.0, 3.0, 5.0, 5.0]


def test_inverse_demand_example():
    q, caps, V = example()
    d = inverse_demand(q, caps, V)
    for p in (0.0, 1.0, 3.0):
        assert d(p) == pytest.approx(4.0)
    assert d(4.0) == pytest.approx(2.0)
    assert d(5.0) == pytest.approx(0.0)
    assert d(7.0) == 0.0
    empty = inverse_demand(QueueState.empty(2), [3.0, 4.0], 2.0)
    assert empty(0.5) == 0.0


def test_inverse_demand_matches_group_sum(rng):
    for _ in range(50):
        q, caps, V = random_state(rng)
        d = inverse_demand(q, caps, V)
        for p in rng.uniform(0, 40, 100):
            assert d(p) == pytest.approx(response(p, q, caps, V), abs=1e-9 * (1 + caps.sum()))


def test_bid_curve_example():
    q, caps, V = example()
    c = build_bid_curve(q, caps, V)
    assert c.kind == QUADRATIC
    assert c.domain_max == 4.0
    assert c.value(2.0) == pytest.approx(9.0)
    xs = np.linspace(0, 4, 10_001)
    assert np.allclose(c.value(xs), 5 * xs - xs ** 2 / 4, atol=1e-12)
    assert c.marginal(0.0) == pytest.approx(5.0)
    assert c.marginal(4.0) == pytest.approx(3.0)
    # numeric quadrature of h(x) = 5 - x/2
    assert np.trapezoid(5 - xs / 2, xs) == pytest.approx(float(c.value(4.0)), rel=1e-9)
    with pytest.raises(ValueError):
        c.value(4.5)
    with pytest.raises(ValueError):
        c.marginal(-1.0)


def test_empty_queues_give_degenerate_curve():
    c = build_bid_curve(QueueState.empty(3), [3.0, 4.0, 5.0], 1.0)
    assert c.domain_max == 0.0
    assert c.segments == ()
    assert c.value(0.0) == 0.0


def test_truncation_at_zero_price(rng):
    q = QueueState([2.0, 30.0], [0.0, 0.0])
    caps = np.array([10.0, 5.0])
    c = build_bid_curve(q, caps, 1.0)
    assert c.domain_max == pytest.approx(inverse_demand(q, caps, 1.0)(0.0))
    assert c.domain_max == pytest.approx(7.0)


def test_curve_matches_quadrature_oracle(rng):
    checked = 0
    while checked < 30:
        q, caps, V = random_state(rng)
        c = build_bid_curve(q, caps, V)
        xs, us, top = quadrature_oracle(q, caps, V)
        assert c.domain_max == pytest.approx(top, abs=1e-9 * (1 + top))
        if top <= 0:
            continue
        ref = np.interp(c.knots, xs, us)
        assert np.allclose(c.value(c.knots), ref, rtol=1e-6, atol=1e-6 * (1 + us.max()))
        checked += 1


def test_marginal_round_trip(rng):
    for _ in range(50):
        q, caps, V = random_state(rng)
        d = inverse_demand(q, caps, V)
        c = build_bid_curve(q, caps, V)
        for seg in c.segments:
            # a price strictly inside the segment's price range
            p = seg.price_lo + (seg.price_hi - seg.price_lo) * rng.uniform(0.1, 0.9)
            assert c.marginal(float(d(p))) == pytest.approx(p, abs=1e-9 * (1 + p))


@given(st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_concave_and_continuous(seed):
    rng = np.random.default_rng(seed)
    q, caps, V = random_state(rng)
    c = build_bid_curve(q, caps, V)
    if not c.segments:
        return
    assert c.value(0.0) == 0.0
    for a, b in zip(c.segments, c.segments[1:]):
        assert abs(float(a.value(a.x_hi)) - b.u_lo) <= 1e-9 * (1 + abs(b.u_lo))
        assert b.price_hi <= a.price_lo + 1e-9
    assert all(s.slope < 0 for s in c.segments)
    xs = np.linspace(0, c.domain_max, 1000)
    u = c.value(xs)
    assert np.max(np.diff(u, 2), initial=0.0) <= 1e-9
    h = [c.marginal(x) for x in xs]
    assert np.all(np.diff(h) <= 1e-9)


def test_record_round_trip():
    q, caps, V = example()
    c = build_bid_curve(q, caps, V)
    back = BidCurve.from_record(c.to_record())
    assert back.value(3.0) == c.value(3.0)
    assert set(c.to_record()) == {"kind", "domain_max", "breakpoints", "segments", "plateaus"}


def test_linear_curve_examples():
    c = build_linear_bid_curve(*example())
    assert c.kind == LINEAR
    assert c.value(4.0) == pytest.approx(20.0)
    assert c.value(1.5) == pytest.approx(7.5)
    two = build_linear_bid_curve(QueueState([10.0, 6.0], [0.0, 0.0]), [4.0, 2.0], 2.0)
    assert two.domain_max == 6.0
    assert two.marginal(1.0) == 5.0 and two.marginal(5.0) == 3.0
    assert two.value(6.0) == pytest.approx(20 + 6)
    pieces = linear_pieces(two)
    for x in np.linspace(0, 6, 61):
        assert two.value(x) == pytest.approx(min(s * x + b for s, b in pieces), abs=1e-12)


def test_sample_curve():
    q, caps, V = example()
    c = build_bid_curve(q, caps, V)
    xs, us = sample_curve(c, 5)
    assert xs.tolist() == [0.0, 1.0, 2.0, 3.0, 4.0]
    assert us == pytest.approx(5 * xs - xs ** 2 / 4)
    xs, us = sample_curve(build_bid_curve(QueueState.empty(1), [1.0], 1.0), 2)
    assert xs.tolist() == [0.0, 0.0] and us.tolist() == [0.0, 0.0]
    with pytest.raises(ValueError):
        sample_curve(c, 1)
    multi = build_bid_curve(QueueState([10.0, 20.0, 5.0], [0.0, 0.0, 0.0]), [4.0, 3.0, 6.0], 2.0)
    with pytest.raises(ValueError):
        sample_curve(multi, multi.knots.size - 1)


def test_chords_under_estimate(rng):
    for _ in range(30):
        q, caps, V = random_state(rng)
        c = build_bid_curve(q, caps, V)
        if not c.segments:
            continue
        xs, us = sample_curve(c, c.knots.size + 7)
        assert set(np.round(c.knots, 12)) <= set(np.round(xs, 12))
        probe = rng.uniform(0, c.domain_max, 200)
        assert np.all(np.interp(probe, xs, us) <= c.value(probe) + 1e-9)
