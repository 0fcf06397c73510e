"""DC network model and market clearing with locational marginal prices.

Every clearing is a small QP over generator outputs ``p`` and aggregator
allocations ``x`` (plus auxiliary columns for some bid formats):

    min  sum_i f_i(p_i) - sum_k utility_k(x_k)
    s.t. sum_i p_i = sum_j d_j + sum_k x_k                       (lambda)
         -F_l <= sum ptdf*p - sum ptdf*d - sum ptdf*x <= F_l      (chi_lo, chi_hi)
         generator and allocation bounds

Line flows are positive in the from->to direction of each line and the PTDF
is referenced to the slack bus, so ``lambda`` is the slack-bus price.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import solver
from .bidding import linear_pieces

logger = logging.getLogger(__name__)


class MarketInfeasibleError(RuntimeError):
    def __init__(self, message, slot=None, status=None):
        super().__init__(message if slot is None else f"slot {slot}: {message}")
        self.slot = slot
        self.status = status


class SegmentSelectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Generator:
    bus: int
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    pmin: float = 0.0
    pmax: float = np.inf

    def __post_init__(self):
        if self.a < 0:
            raise ValueError("generator cost must be convex (a >= 0)")
        if self.pmin > self.pmax:
            raise ValueError("generator pmin exceeds pmax")

    def cost(self, p):
        return self.a * p * p + self.b * p + self.c


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    reactance: float = 1.0
    limit: float = np.inf

    def __post_init__(self):
        if self.limit <= 0:
            raise ValueError("line limit must be positive")
        if self.reactance == 0:
            raise ValueError("line reactance must be nonzero")


@dataclass(frozen=True)
class Load:
    bus: int
    series: np.ndarray

    def at(self, t):
        s = self.series
        return float(s[t]) if s.ndim else float(s)


@dataclass
class Network:
    n_bus: int
    generators: list
    lines: list
    loads: list = field(default_factory=list)
    slack: int = 0
    ptdf: np.ndarray | None = None

    def __post_init__(self):
        self.loads = [Load(ld.bus, np.asarray(ld.series, dtype=float)) for ld in self.loads]
        for obj in [*self.generators, *self.loads]:
            if not 0 <= obj.bus < self.n_bus:
                raise ValueError(f"bus {obj.bus} out of range")
        for ln in self.lines:
            if not (0 <= ln.from_bus < self.n_bus and 0 <= ln.to_bus < self.n_bus):
                raise ValueError(f"line {ln.from_bus}-{ln.to_bus} references an unknown bus")
        if self.ptdf is None:
            self.ptdf = compute_ptdf(self)
        else:
            self.ptdf = np.asarray(self.ptdf, dtype=float)
            if self.ptdf.shape != (self.n_bus, len(self.lines)):
                raise ValueError("ptdf must be (n_bus, n_lines)")
        if not np.all(np.isfinite(self.ptdf)):
            raise ValueError("ptdf must be finite")

    @property
    def limits(self):
        return np.array([ln.limit for ln in self.lines], dtype=float)

    def load_vector(self, t):
        """Fixed demand per bus at slot ``t``."""
        d = np.zeros(self.n_bus)
        for ld in self.loads:
            d[ld.bus] += ld.at(t)
        return d

    def generation_cost(self, p):
        return float(sum(g.cost(pi) for g, pi in zip(self.generators, p)))


def _connected(n_bus, lines):
    adj = [[] for _ in range(n_bus)]
    for ln in lines:
        adj[ln.from_bus].append(ln.to_bus)
        adj[ln.to_bus].append(ln.from_bus)
    seen = {0}
    todo = deque([0])
    while todo:
        u = todo.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                todo.append(v)
    return len(seen) == n_bus


def compute_ptdf(network: Network) -> np.ndarray:
    """Injection shift factors (n_bus x n_lines) for injections withdrawn at the slack bus."""
    n, L = network.n_bus, len(network.lines)
    if n == 1:
        return np.zeros((1, L))
    if not _connected(n, network.lines):
        raise ValueError("network is not connected")
    inc = np.zeros((L, n))
    for l, ln in enumerate(network.lines):
        inc[l, ln.from_bus] += 1.0
        inc[l, ln.to_bus] -= 1.0
    b = np.array([1.0 / ln.reactance for ln in network.lines])
    B = inc.T @ (b[:, None] * inc)
    keep = [i for i in range(n) if i != network.slack]
    sens = (b[:, None] * inc[:, keep]) @ np.linalg.inv(B[np.ix_(keep, keep)])
    ptdf = np.zeros((n, L))
    ptdf[keep, :] = sens.T
    return ptdf


def line_flow(network: Network, dispatch, loads, allocations, agg_buses, l=None):
    """Flow on line ``l`` (or every line) from bus injections via the PTDF."""
    inj = np.zeros(network.n_bus)
    for g, p in zip(network.generators, dispatch):
        inj[g.bus] += p
    inj -= np.asarray(loads, dtype=float)
    for bus, x in zip(agg_buses, allocations):
        inj[bus] -= x
    flows = network.ptdf.T @ inj
    return flows if l is None else float(flows[l])


def lmp(lam, chi_lo, chi_hi, ptdf, bus):
    """Locational price at ``bus``: energy price plus congestion terms."""
    return float(lam + ptdf[bus] @ (np.asarray(chi_lo) - np.asarray(chi_hi)))


@dataclass
class ClearingResult:
    dispatch: np.ndarray
    allocations: np.ndarray
    lam: float
    line_duals_lower: np.ndarray
    line_duals_upper: np.ndarray
    lmps: np.ndarray
    objective: float
    flows: np.ndarray
    binding: tuple = ()
    segments: tuple = ()
    iterations: int = 0
    alloc_duals: np.ndarray | None = None

    def to_record(self):
        return {
            "objective": self.objective,
            "lambda": self.lam,
            "lmps": self.lmps.tolist(),
            "allocations": self.allocations.tolist(),
            "dispatch": self.dispatch.tolist(),
            "flows": self.flows.tolist(),
            "binding": list(self.binding),
        }


class _Clearing:
    """Column layout [p (I), x (K), extra (E)] with the shared network rows."""

    def __init__(self, network: Network, t, buses, n_extra=0, load=None):
        self.net = network
        self.t = t
        self.buses = list(buses)
        self.I = len(network.generators)
        self.K = len(self.buses)
        self.E = n_extra
        self.n = self.I + self.K + self.E
        self.load = network.load_vector(t) if load is None else np.asarray(load, dtype=float)
        self.H = np.zeros((self.n, self.n))
        self.c = np.zeros(self.n)
        for i, g in enumerate(network.generators):
            self.H[i, i] = 2.0 * g.a
            self.c[i] = g.b
        self.rows, self.rhs = [], []
        for i, g in enumerate(network.generators):
            if np.isfinite(g.pmax):
                self.add_row({i: 1.0}, g.pmax)
            if np.isfinite(g.pmin):
                self.add_row({i: -1.0}, -g.pmin)
        ptdf = network.ptdf
        base = ptdf.T @ self.load
        self.line_rows = []
        for l, ln in enumerate(network.lines):
            if not np.isfinite(ln.limit):
                self.line_rows.append((None, None))
                continue
            row = np.zeros(self.n)
            for i, g in enumerate(network.generators):
                row[i] += ptdf[g.bus, l]
            for k, bus in enumerate(self.buses):
                row[self.I + k] -= ptdf[bus, l]
            hi = self._append(row, ln.limit + base[l])
            lo = self._append(-row, ln.limit - base[l])
            self.line_rows.append((lo, hi))

    def xcol(self, k):
        return self.I + k

    def _append(self, row, rhs):
        self.rows.append(row)
        self.rhs.append(rhs)
        return len(self.rows) - 1

    def add_row(self, coeffs, rhs):
        row = np.zeros(self.n)
        for j, v in coeffs.items():
            row[j] += v
        return self._append(row, rhs)

    def problem(self, extra_eq=()):
        eq = np.zeros((1, self.n))
        eq[0, :self.I] = 1.0
        eq[0, self.I:self.I + self.K] = -1.0
        eq_rhs = [self.load.sum()]
        for coeffs, rhs in extra_eq:
            row = np.zeros(self.n)
            for j, v in coeffs.items():
                row[j] += v
            eq = np.vstack([eq, row])
            eq_rhs.append(rhs)
        G = np.array(self.rows) if self.rows else np.zeros((0, self.n))
        return solver.QpProblem(self.H, self.c, eq, np.array(eq_rhs), G, np.array(self.rhs))

    def solve(self, extra_eq=(), debug=False, **kw):
        prob = self.problem(extra_eq)
        sol = solver.solve_qp(prob, debug=debug, **kw)
        if not sol.optimal:
            raise MarketInfeasibleError(f"market clearing {sol.status}", self.t, sol.status)
        return prob, sol

    def result(self, sol, objective, **extra):
        z = sol.primal
        p, x = z[:self.I], z[self.I:self.I + self.K]
        lam = -float(sol.duals_eq[0])
        L = len(self.net.lines)
        chi_lo, chi_hi = np.zeros(L), np.zeros(L)
        for l, (lo, hi) in enumerate(self.line_rows):
            if lo is not None:
                chi_lo[l] = sol.duals_ineq[lo]
                chi_hi[l] = sol.duals_ineq[hi]
        prices = np.array([lmp(lam, chi_lo, chi_hi, self.net.ptdf, b) for b in self.buses])
        flows = line_flow(self.net, p, self.load, x, self.buses)
        lim = self.net.limits
        fin = np.isfinite(lim)
        near = np.zeros(lim.size, dtype=bool)
        near[fin] = np.abs(flows[fin]) >= lim[fin] - 1e-7 * (1 + lim[fin])
        binding = tuple(int(l) for l in np.nonzero(near)[0])
        return ClearingResult(dispatch=p, allocations=x, lam=lam, line_duals_lower=chi_lo,
                              line_duals_upper=chi_hi, lmps=prices, objective=objective,
                              flows=flows, binding=binding, iterations=sol.iterations, **extra)


def _check_buses(network, buses):
    for b in buses:
        if not 0 <= b < network.n_bus:
            raise ValueError(f"aggregator bus {b} out of range")


def clear_p4(network: Network, buses, samples, t, *, formulation="epigraph", load=None,
             debug=False) -> ClearingResult:
    """Clearing with each bid replaced by the concave interpolant of its samples.

    ``samples[k]`` is ``(xs, us)`` from :func:`~evbid.bidding.sample_curve`.  The
    default epigraph form bounds an auxiliary utility column by every chord;
    ``formulation="convex_combination"`` uses one weight per sample point instead.
    Both describe the same feasible (x, utility) region.
    """
    _check_buses(network, buses)
    samples = [(np.asarray(xs, dtype=float), np.asarray(us, dtype=float)) for xs, us in samples]
    if any(xs.size < 2 for xs, _ in samples):
        raise ValueError("each aggregator needs at least two sample points")
    if formulation == "convex_combination":
        return _clear_p4_weights(network, buses, samples, t, load, debug)
    if formulation != "epigraph":
        raise ValueError(f"unknown formulation {formulation!r}")
    K = len(buses)
    cl = _Clearing(network, t, buses, n_extra=K, load=load)
    for k, (xs, us) in enumerate(samples):
        xk, yk = cl.xcol(k), cl.I + K + k
        cl.c[yk] = -1.0
        cl.add_row({xk: -1.0}, -xs[0])
        cl.add_row({xk: 1.0}, xs[-1])
        cl.add_row({yk: 1.0}, us.max())
        for m in range(xs.size - 1):
            dx = xs[m + 1] - xs[m]
            if dx <= 1e-12 * (1.0 + abs(xs[-1])):
                continue
            s = (us[m + 1] - us[m]) / dx
            cl.add_row({yk: 1.0, xk: -s}, us[m] - s * xs[m])
    _, sol = cl.solve(debug=debug)
    z = sol.primal
    obj = network.generation_cost(z[:cl.I]) - float(z[cl.I + K:].sum())
    return cl.result(sol, obj)


def _clear_p4_weights(network, buses, samples, t, load, debug):
    sizes = [xs.size for xs, _ in samples]
    cl = _Clearing(network, t, buses, n_extra=sum(sizes), load=load)
    eqs = []
    off = cl.I + cl.K
    for k, (xs, us) in enumerate(samples):
        cols = range(off, off + xs.size)
        link = {cl.xcol(k): 1.0}
        for j, col in enumerate(cols):
            cl.c[col] = -us[j]
            cl.add_row({col: -1.0}, 0.0)
            link[col] = -xs[j]
        eqs.append((link, 0.0))
        eqs.append(({col: 1.0 for col in cols}, 1.0))
        off += xs.size
    _, sol = cl.solve(extra_eq=eqs, debug=debug)
    z = sol.primal
    utility = -float(cl.c[cl.I + cl.K:] @ z[cl.I + cl.K:])
    return cl.result(sol, network.generation_cost(z[:cl.I]) - utility)


def refine_p5(network: Network, buses, curves, p4: ClearingResult, t, *, load=None,
              debug=False) -> ClearingResult:
    """Exact clearing on the bid segments located by the linearized clearing.

    Each aggregator's bid is replaced by the quadratic piece of the segment
    holding its linearized allocation.  When an allocation presses against its
    segment boundary with a nonzero multiplier the neighbouring segment is tried;
    a bounce between two neighbours means the optimum sits on the kink between
    them, and the allocation is fixed there.
    """
    _check_buses(network, buses)
    curves = list(curves)
    K = len(buses)
    seg = [c.segment_index(x) for c, x in zip(curves, p4.allocations)]
    pinned: dict[int, float] = {}
    tried = [set() for _ in range(K)]
    budget = 2 * max(1, sum(len(c.segments) for c in curves)) + 2
    for it in range(budget):
        cl = _Clearing(network, t, buses, load=load)
        lo_rows, hi_rows = {}, {}
        eqs = []
        for k, curve in enumerate(curves):
            xk = cl.xcol(k)
            if seg[k] < 0:
                eqs.append(({xk: 1.0}, 0.0))
                continue
            s = curve.segments[seg[k]]
            tried[k].add(seg[k])
            a2, a1, _ = s.quadratic_coefficients()
            cl.H[xk, xk] = -2.0 * a2
            cl.c[xk] = -a1
            if k in pinned:
                eqs.append(({xk: 1.0}, pinned[k]))
            else:
                lo_rows[k] = cl.add_row({xk: -1.0}, -s.x_lo)
                hi_rows[k] = cl.add_row({xk: 1.0}, s.x_hi)
        _, sol = cl.solve(extra_eq=eqs, debug=debug)
        moves = {}
        for k, curve in enumerate(curves):
            if seg[k] < 0 or k in pinned:
                continue
            scale = 1e-9 * (1.0 + abs(curve.segments[seg[k]].price_hi))
            up = sol.duals_ineq[hi_rows[k]] > scale and seg[k] < len(curve.segments) - 1
            down = sol.duals_ineq[lo_rows[k]] > scale and seg[k] > 0
            if up or down:
                nxt = seg[k] + (1 if up else -1)
                if nxt in tried[k]:
                    edge = curve.segments[min(seg[k], nxt)].x_hi
                    pinned[k] = edge
                    moves[k] = min(seg[k], nxt)
                else:
                    moves[k] = nxt
        if not moves and pinned:
            # a pin is only right if the local price sits inside the kink's price gap
            trial = cl.result(sol, 0.0)
            for k, edge in list(pinned.items()):
                lo_seg = curves[k].segments[seg[k]]
                tol = 1e-7 * (1.0 + abs(lo_seg.price_hi))
                if seg[k] + 1 >= len(curves[k].segments):
                    continue
                left = lo_seg.price_lo
                right = curves[k].segments[seg[k] + 1].price_hi
                price = trial.lmps[k]
                if price > left + tol or price < right - tol:
                    del pinned[k]
                    tried[k] = set()
                    moves[k] = seg[k] if price > left + tol else seg[k] + 1
        if not moves:
            z = sol.primal
            x = z[cl.I:cl.I + K]
            utility = sum(float(c.value(min(max(xv, 0.0), c.domain_max))) for c, xv in zip(curves, x))
            obj = network.generation_cost(z[:cl.I]) - utility
            res = cl.result(sol, obj, segments=tuple(seg))
            res.iterations = it + 1
            return res
        for k, n in moves.items():
            seg[k] = n
    raise SegmentSelectionError(
        f"slot {t}: segment selection did not settle within {budget} re-solves "
        f"(segments={seg}, pinned={sorted(pinned)})")


def clear_p3_linear(network: Network, buses, curves, t, *, load=None, debug=False):
    """Clearing with concave piecewise-linear bids in epigraph form."""
    _check_buses(network, buses)
    K = len(buses)
    cl = _Clearing(network, t, buses, n_extra=K, load=load)
    for k, curve in enumerate(curves):
        xk, yk = cl.xcol(k), cl.I + K + k
        cl.c[yk] = -1.0
        cl.add_row({xk: -1.0}, 0.0)
        cl.add_row({xk: 1.0}, curve.domain_max)
        cl.add_row({yk: 1.0}, float(curve.value(curve.domain_max)))
        for slope, icpt in linear_pieces(curve):
            cl.add_row({yk: 1.0, xk: -slope}, icpt)
    _, sol = cl.solve(debug=debug)
    z = sol.primal
    return cl.result(sol, network.generation_cost(z[:cl.I]) - float(z[cl.I + K:].sum()))


def clear_p3_bounds(network: Network, buses, lower, upper, t, *, load=None, debug=False):
    """Generation-cost clearing with each allocation confined to ``[lower, upper]``."""
    _check_buses(network, buses)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if np.any(lower > upper + 1e-12):
        raise ValueError("allocation lower bound exceeds upper bound")
    cl = _Clearing(network, t, buses, load=load)
    for k in range(len(buses)):
        cl.add_row({cl.xcol(k): -1.0}, -lower[k])
        cl.add_row({cl.xcol(k): 1.0}, upper[k])
    _, sol = cl.solve(debug=debug)
    return cl.result(sol, network.generation_cost(sol.primal[:cl.I]))


def clear_dispatch(network: Network, t, *, load=None, debug=False):
    """Economic dispatch of fixed load only."""
    return clear_p3_bounds(network, [], [], [], t, load=load, debug=debug)
