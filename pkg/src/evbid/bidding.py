"""Bid curves built from an aggregator's queue snapshot.

The aggregate charging response to a price is the sum of per-group clipped
lines ``clip(q + z - V*price, 0, X)``; it is piecewise linear and
non-increasing in price.  Its inverse is the marginal utility ``h(x)`` and the
bid curve is ``u(x) = integral_0^x h``, a concave piecewise quadratic.

Segments store ``u`` in local form around their left end::

    u(x) = u_lo + price_hi * (x - x_lo) + slope/2 * (x - x_lo)**2,

where ``price_hi = h(x_lo)`` and ``slope = dh/dx <= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scheduler import QueueState

LOWER = "lower"
UPPER = "upper"
QUADRATIC = "quadratic-piecewise"
LINEAR = "linear-piecewise"


@dataclass(frozen=True)
class Segment:
    x_lo: float
    x_hi: float
    u_lo: float
    price_hi: float
    slope: float

    @property
    def width(self):
        return self.x_hi - self.x_lo

    @property
    def price_lo(self):
        return self.price_hi + self.slope * self.width

    def value(self, x):
        d = np.asarray(x, dtype=float) - self.x_lo
        return self.u_lo + self.price_hi * d + 0.5 * self.slope * d * d

    def marginal(self, x):
        return self.price_hi + self.slope * (np.asarray(x, dtype=float) - self.x_lo)

    def quadratic_coefficients(self):
        """(a2, a1, a0) with u(x) = a2 x^2 + a1 x + a0 on this segment."""
        a2 = 0.5 * self.slope
        a1 = self.price_hi - self.slope * self.x_lo
        a0 = self.u_lo - self.price_hi * self.x_lo + 0.5 * self.slope * self.x_lo ** 2
        return a2, a1, a0

    def to_record(self):
        return {"x_lo": self.x_lo, "x_hi": self.x_hi, "u_lo": self.u_lo,
                "price_hi": self.price_hi, "slope": self.slope}


@dataclass(frozen=True)
class BidCurve:
    kind: str
    segments: tuple
    domain_max: float
    breakpoints_price: tuple = ()
    plateaus: tuple = field(default_factory=tuple)  # (x, price_hi, price_lo) jumps of h

    def _locate(self, x):
        """Index of the segment whose half-open interval [x_lo, x_hi) holds x."""
        los = np.array([s.x_lo for s in self.segments])
        idx = np.searchsorted(los, x, side="right") - 1
        return np.clip(idx, 0, len(self.segments) - 1)

    def _check_domain(self, x):
        x = np.asarray(x, dtype=float)
        tol = 1e-9 * (1.0 + self.domain_max)
        if np.any(x < -tol) or np.any(x > self.domain_max + tol):
            raise ValueError(f"x outside bid domain [0, {self.domain_max}]")
        return np.clip(x, 0.0, self.domain_max)

    def value(self, x):
        x = self._check_domain(x)
        if not self.segments:
            return np.zeros_like(x) if x.ndim else 0.0
        idx = self._locate(x)
        out = np.empty(np.shape(x))
        flat_x, flat_i = np.atleast_1d(x), np.atleast_1d(idx)
        flat_out = np.atleast_1d(out)
        for j, seg in enumerate(self.segments):
            m = flat_i == j
            if m.any():
                flat_out[m] = seg.value(flat_x[m])
        return flat_out.reshape(np.shape(x)) if np.ndim(x) else float(flat_out[0])

    __call__ = value

    def marginal(self, x):
        """Right derivative of ``u`` (left derivative at ``domain_max``)."""
        x = float(self._check_domain(x))
        if not self.segments:
            return max(max(self.breakpoints_price, default=0.0), 0.0)
        if x >= self.domain_max:
            return float(self.segments[-1].price_lo)
        return float(self.segments[int(self._locate(x))].marginal(x))

    def segment_index(self, x):
        """Index of the segment with x in (x_lo, x_hi]; 0 maps to the first segment."""
        if not self.segments:
            return -1
        his = np.array([s.x_hi for s in self.segments])
        idx = int(np.searchsorted(his, x - 1e-12 * (1.0 + abs(x)), side="left"))
        return min(idx, len(self.segments) - 1)

    @property
    def knots(self):
        """Segment boundaries in ascending x, including 0 and domain_max."""
        pts = {0.0, float(self.domain_max)}
        for s in self.segments:
            pts.add(float(s.x_lo))
            pts.add(float(s.x_hi))
        return np.array(sorted(pts))

    def to_record(self):
        return {
            "kind": self.kind,
            "domain_max": self.domain_max,
            "breakpoints": list(self.breakpoints_price),
            "segments": [s.to_record() for s in self.segments],
            "plateaus": [list(p) for p in self.plateaus],
        }

    @classmethod
    def from_record(cls, rec):
        return cls(kind=rec["kind"], domain_max=float(rec["domain_max"]),
                   breakpoints_price=tuple(rec.get("breakpoints", ())),
                   segments=tuple(Segment(**s) for s in rec["segments"]),
                   plateaus=tuple(tuple(p) for p in rec.get("plateaus", ())))


def breakpoints(queues: QueueState, caps, V):
    """Sorted ``(price, tag)`` pairs: each group's full-charge and zero-charge prices."""
    if V <= 0:
        raise ValueError("V must be positive")
    s = np.asarray(queues.backlog, dtype=float)
    caps = np.asarray(caps, dtype=float)
    pts = [((sg - xg) / V, LOWER) for sg, xg in zip(s, caps)]
    pts += [(sg / V, UPPER) for sg in s]
    return sorted(pts, key=lambda p: p[0])


@dataclass(frozen=True)
class InverseDemand:
    """Aggregate charging response as a piecewise-linear function of price.

    On ``(prices[n-1], prices[n]]`` the response is ``slopes[n] * p + intercepts[n]``
    with ``prices[-1]`` read as minus infinity; beyond the last price it is zero.
    """
    prices: np.ndarray
    slopes: np.ndarray
    intercepts: np.ndarray

    def __call__(self, price):
        p = np.asarray(price, dtype=float)
        n = np.searchsorted(self.prices, p, side="left")
        return np.maximum(self.slopes[n] * p + self.intercepts[n], 0.0)

    def at_breakpoints(self):
        return self.slopes[:-1] * self.prices + self.intercepts[:-1]


def inverse_demand(queues: QueueState, caps, V) -> InverseDemand:
    """Slope/intercept recursion over the sorted breakpoints.

    Coincident breakpoints are merged; the slope change at a price is
    ``V * (#upper - #lower)`` over all breakpoints equal to it.
    """
    bps = breakpoints(queues, caps, V)
    caps = np.asarray(caps, dtype=float)
    values = []
    change = []
    for price, tag in bps:
        d = V if tag == UPPER else -V
        if values and price == values[-1]:
            change[-1] += d
        else:
            values.append(price)
            change.append(d)
    slopes = [0.0]
    intercepts = [float(caps.sum())]
    for price, d in zip(values, change):
        c = slopes[-1] + d
        intercepts.append(intercepts[-1] + (slopes[-1] - c) * price)
        slopes.append(c)
    # the last piece is identically zero; clean rounding drift
    slopes[-1], intercepts[-1] = 0.0, 0.0
    return InverseDemand(np.array(values), np.array(slopes), np.array(intercepts))


def build_bid_curve(queues: QueueState, caps, V) -> BidCurve:
    """Integrate the inverse of the aggregate response, backwards from high prices."""
    demand = inverse_demand(queues, caps, V)
    prices = demand.prices
    xs = demand.at_breakpoints()
    bps = tuple(p for p, _ in breakpoints(queues, caps, V))
    N = len(prices)
    x0 = float(demand(0.0)) if N else 0.0
    if N == 0 or prices[-1] <= 0.0 or x0 <= 0.0:
        return BidCurve(QUADRATIC, (), 0.0, bps)
    segments = []
    plateaus = []
    u_acc = 0.0
    for n in range(N - 1, -1, -1):
        p_hi = prices[n]
        if p_hi <= 0.0:
            break
        p_lo = max(prices[n - 1], 0.0) if n > 0 else 0.0
        slope = demand.slopes[n]
        x_lo = float(xs[n])
        if x_lo <= 1e-12 * (1.0 + x0):  # clip sums leave round-off at the top price
            x_lo = 0.0
        x_hi = float(demand(p_lo))
        if slope != 0.0 and x_hi > x_lo:
            seg = Segment(x_lo=x_lo, x_hi=x_hi, u_lo=u_acc, price_hi=float(p_hi),
                          slope=1.0 / slope)
            segments.append(seg)
            u_acc = float(seg.value(x_hi))
        elif p_hi > p_lo:
            plateaus.append((x_lo, float(p_hi), float(p_lo)))
        if n == 0 or prices[n - 1] <= 0.0:
            break
    # pin the domain to the response at zero price and drop sub-rounding slivers
    kept = [s for s in segments if s.width > 1e-12 * (1.0 + x0)]
    segments, x, u = [], 0.0, 0.0
    for i, s in enumerate(kept):
        x_hi = x0 if i == len(kept) - 1 else s.x_hi
        seg = Segment(x, x_hi, u, s.price_hi, s.slope)
        segments.append(seg)
        x, u = x_hi, float(seg.value(x_hi))
    return BidCurve(QUADRATIC, tuple(segments), x0, bps, tuple(plateaus))


def build_linear_bid_curve(queues: QueueState, caps, V) -> BidCurve:
    """Concave piecewise-linear bid of the bang-bang (linearized) response.

    Groups are stacked in descending order of their zero-charge price; each
    contributes a piece of slope equal to that price over its cap.
    """
    caps = np.asarray(caps, dtype=float)
    w_hi = np.asarray(queues.backlog, dtype=float) / V
    order = sorted((g for g in range(len(caps)) if caps[g] > 0 and w_hi[g] > 0),
                   key=lambda g: (-w_hi[g], g))
    segments = []
    x, u = 0.0, 0.0
    for g in order:
        seg = Segment(x_lo=x, x_hi=x + caps[g], u_lo=u, price_hi=float(w_hi[g]), slope=0.0)
        segments.append(seg)
        x, u = seg.x_hi, float(seg.value(seg.x_hi))
    return BidCurve(LINEAR, tuple(segments), x, tuple(sorted(w_hi.tolist())))


def linear_pieces(curve: BidCurve):
    """Affine pieces (slope, intercept) whose pointwise minimum is the curve."""
    return [(s.price_hi, s.u_lo - s.price_hi * s.x_lo) for s in curve.segments]


def sample_curve(curve: BidCurve, M: int):
    """``M`` sample points: every knot plus the rest spread evenly inside segments."""
    if M < 2:
        raise ValueError("need at least two samples")
    if not curve.segments:
        return np.zeros(M), np.zeros(M)
    knots = curve.knots
    if M < knots.size:
        raise ValueError(f"M={M} is below the {knots.size} knots of the curve")
    extra = M - knots.size
    widths = np.array([s.width for s in curve.segments])
    share = extra * widths / widths.sum()
    counts = np.floor(share).astype(int)
    leftover = extra - counts.sum()
    if leftover:
        order = np.lexsort((np.arange(widths.size), -(share - counts)))
        counts[order[:leftover]] += 1
    pts = [knots]
    for seg, k in zip(curve.segments, counts):
        if k:
            pts.append(seg.x_lo + seg.width * np.arange(1, k + 1) / (k + 1))
    xs = np.sort(np.concatenate(pts))
    return xs, np.asarray(curve.value(xs), dtype=float)
