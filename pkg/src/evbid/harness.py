"""Slot-by-slot simulation of aggregator bidding and market clearing.

Strategies
----------
``online``  quadratic bid curves, linearized clearing then exact refinement,
            each aggregator schedules at its own locational price.
``b1``      perfect-foresight full-horizon dispatch (offline reference).
``b2``      bang-bang linearized scheduler with piecewise-linear bids.
``b3``      bounds-only bids; the market picks allocations inside them.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import bidding, market, scheduler
from .fleet import ENERGY_TOL, Fleet
from .scheduler import GapConstants, QueueState, SchedulerParams

logger = logging.getLogger(__name__)

STRATEGIES = ("online", "b1", "b2", "b3")
METRIC_COLUMNS = ("t", "agg_id", "lmp", "x", "cost_cum", "q_total", "z_total", "completed")


@dataclass
class SlotMetrics:
    t: int
    agg_id: str
    lmp: float
    x: float
    cost: float
    cost_cum: float
    q_total: float
    z_total: float
    completed: int
    completion_events: int = 0

    def row(self):
        return (self.t, self.agg_id, self.lmp, self.x, self.cost_cum, self.q_total,
                self.z_total, self.completed)


@dataclass
class RunSummary:
    strategy: str
    total_cost: float
    energy_kwh: float
    unit_cost: float
    completion_rate: float
    n_evs: int
    mean_delay: dict = field(default_factory=dict)
    max_delay: dict = field(default_factory=dict)
    delay_bound: dict = field(default_factory=dict)
    delay_violations: int = 0
    gap_bound: float = float("nan")
    realized_gap: float = float("nan")
    prop4_max_mismatch: float = 0.0
    clamp_events: int = 0
    runtime_s: float = 0.0
    V: float = float("nan")
    seed: int | None = None

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class RunResult:
    summary: RunSummary
    metrics: list
    fleets: list = field(default_factory=list)
    costs: np.ndarray | None = None   # (T, K) per-slot aggregator payments
    prices: np.ndarray | None = None  # (T, K) locational prices
    allocations: np.ndarray | None = None


class _Agent:
    """One aggregator's mutable state during a run."""

    def __init__(self, spec, params, V, alpha_override=None):
        self.spec = spec
        evs = [dataclasses.replace(ev) for ev in spec.evs]
        self.fleet = Fleet(evs, spec.groups, params)
        alpha = [g.alpha for g in spec.groups] if alpha_override is None else \
            np.broadcast_to(alpha_override, (len(spec.groups),))
        self.sched = SchedulerParams(V, alpha, [g.parking_duration for g in spec.groups])
        self.queues = QueueState.empty(len(spec.groups))
        self.cost_cum = 0.0
        self.completed = int(self.fleet.completed().sum())


def _summary(strategy, agents, costs, allocations, params, started, V=float("nan"), seed=None):
    dt = params.dt
    total_cost = float(costs.sum())
    energy = float(allocations.sum() * dt)
    n = sum(len(a.fleet) for a in agents)
    done = sum(int(a.fleet.completed().sum()) for a in agents)
    mean_d, max_d, bound_d = {}, {}, {}
    violations = 0
    for a in agents:
        delays = a.fleet.delays()
        for g, grp in enumerate(a.spec.groups):
            key = f"{a.spec.name}/g{grp.group_id}"
            members = a.fleet.group_of == g
            if not members.any():
                continue
            d = delays[members]
            mean_d[key] = float(d.mean())
            max_d[key] = int(d.max())
            bound = float(scheduler.delay_bound(g, a.queues, a.sched))
            bound_d[key] = bound
            violations += int(np.sum(d > bound + 1e-9))
    return RunSummary(strategy=strategy, total_cost=total_cost, energy_kwh=energy,
                      unit_cost=total_cost / energy if energy > 0 else 0.0,
                      completion_rate=done / n if n else 1.0, n_evs=n,
                      mean_delay=mean_d, max_delay=max_d, delay_bound=bound_d,
                      delay_violations=violations, runtime_s=time.perf_counter() - started,
                      V=V, seed=seed)


def _bid_lower_bound(fleet: Fleet, t, caps):
    """Hybrid minimum allocation: max of average-rate and must-finish-now totals."""
    p = fleet.params
    parked = caps > 0
    short = np.maximum(fleet.e_target - fleet.energy, 0.0)
    left = np.maximum(fleet.departure - t, 1)
    avg = short / (p.slot_gain * left)
    urgent = (short - fleet.power_cap * p.slot_gain * (left - 1)) / p.slot_gain
    x1 = float(np.sum(np.where(parked, avg, 0.0)))
    x2 = float(np.sum(np.where(parked, np.maximum(urgent, 0.0), 0.0)))
    return max(x1, x2)


def run_online(scenario, *, strategy="online", V=None, alpha=None, debug=False,
               samples=None, observer=None) -> RunResult:
    """Simulate the whole horizon with one of the slot-by-slot strategies.

    ``observer(t, k, curve, price, allocation)`` is called for every aggregator
    after each clearing (``curve`` is None for bounds-only bids).
    """
    if strategy == "b1":
        return run_strategy(scenario, "b1", V=V, alpha=alpha, samples=samples)
    if strategy not in ("online", "b2", "b3"):
        raise ValueError(f"unknown strategy {strategy!r}")
    started = time.perf_counter()
    params = scenario.params
    V = scenario.V if V is None else V
    samples = scenario.samples if samples is None else samples
    agents = [_Agent(spec, params, V, alpha) for spec in scenario.aggregators]
    buses = [a.spec.bus for a in agents]
    net = scenario.network
    T, K = params.horizon, len(agents)
    costs = np.zeros((T, K))
    prices = np.zeros((T, K))
    alloc = np.zeros((T, K))
    metrics = []
    prop4 = 0.0
    clamps = 0
    for t in range(T):
        series = [a.fleet.group_series(t) for a in agents]
        ev_caps = [a.fleet.max_powers(t) for a in agents]
        for a, (arr, caps) in zip(agents, series):
            a.queues.observe(arr, caps)
        try:
            if strategy == "online":
                curves = [bidding.build_bid_curve(a.queues, caps, V) for a, (_, caps) in zip(agents, series)]
                pts = [bidding.sample_curve(c, samples + c.knots.size) for c in curves]
                p4 = market.clear_p4(net, buses, pts, t, debug=debug)
                res = market.refine_p5(net, buses, curves, p4, t, debug=debug)
            elif strategy == "b2":
                curves = [bidding.build_linear_bid_curve(a.queues, caps, V)
                          for a, (_, caps) in zip(agents, series)]
                res = market.clear_p3_linear(net, buses, curves, t, debug=debug)
            else:
                lower, upper = [], []
                for a, (_, caps), evc in zip(agents, series, ev_caps):
                    hi = float(caps.sum())
                    lo = _bid_lower_bound(a.fleet, t, evc)
                    if lo > hi:
                        clamps += 1
                        logger.info("slot %d: lower bound %.3f clamped to cap %.3f", t, lo, hi)
                        lo = hi
                    lower.append(lo)
                    upper.append(hi)
                res = market.clear_p3_bounds(net, buses, lower, upper, t, debug=debug)
        except (market.MarketInfeasibleError, market.SegmentSelectionError) as exc:
            raise market.MarketInfeasibleError(f"{exc}; aggregator caps="
                                               f"{[float(s[1].sum()) for s in series]}", t) from exc
        for k, (a, (arr, caps), evc) in enumerate(zip(agents, series, ev_caps)):
            price = float(res.lmps[k])
            x_k = float(np.clip(res.allocations[k], 0.0, caps.sum()))
            if observer is not None:
                observer(t, k, curves[k] if strategy != "b3" else None, price, x_k)
            if strategy == "online":
                x_g = scheduler.solve_p2(max(price, 0.0), a.queues, caps, a.sched)
                prop4 = max(prop4, abs(x_k - x_g.sum()) / (1.0 + caps.sum()))
                x_g = np.minimum(x_g, caps)
                p = a.fleet.disaggregate(x_g, t, evc)
            elif strategy == "b2":
                x_g = scheduler.solve_p2_linear(max(price, 0.0), a.queues, caps, a.sched, total=x_k)
                p = a.fleet.disaggregate(x_g, t, evc)
            else:
                p = a.fleet.disaggregate_total(x_k, t, evc)
                x_g = a.fleet.group_sum(p)
            newly = a.fleet.step(p, t)
            a.completed += newly
            a.queues.advance(x_g, arr, a.sched)
            cost = price * x_k * params.dt
            a.cost_cum += cost
            costs[t, k], prices[t, k], alloc[t, k] = cost, price, x_k
            metrics.append(SlotMetrics(t=t, agg_id=a.spec.name, lmp=price, x=x_k, cost=cost,
                                       cost_cum=a.cost_cum, q_total=float(a.queues.q.sum()),
                                       z_total=float(a.queues.z.sum()),
                                       completed=int(a.fleet.completed().sum()),
                                       completion_events=newly))
    summary = _summary(strategy, agents, costs, alloc, params, started, V, scenario.seed)
    summary.prop4_max_mismatch = prop4
    summary.clamp_events = clamps
    if strategy == "online":
        summary.gap_bound = float(sum(scheduler.gap_bound(a.sched, GapConstants.from_queues(a.queues))
                                      for a in agents))
    return RunResult(summary, metrics, [a.fleet for a in agents], costs, prices, alloc)


def offline_targets(fleet: Fleet, horizon):
    """Energy each EV can get offline: its need, or what full power delivers in time."""
    p = fleet.params
    avail = np.maximum(np.minimum(fleet.departure, horizon) - fleet.arrival, 0)
    need = np.maximum(fleet.e_target - fleet.energy, 0.0)
    return np.minimum(need, fleet.power_cap * p.slot_gain * avail), need


# qdldl factors this banded KKT system several times faster than the default backend
_solver_opts = {"direct_solve_method": "qdldl"}


def delivered_energy(result: RunResult):
    """Per-aggregator arrays of energy delivered to each EV during a run."""
    return [f.energy - f.e_arrival for f in result.fleets]


def run_offline_oracle(scenario, service="matched", reference: RunResult | None = None) -> RunResult:
    """Full-horizon social-welfare dispatch with perfect foresight of arrivals and loads.

    ``service="matched"`` asks every EV to receive at least the energy the
    online scheduler delivered to it (``reference``, run on demand), so both
    runs buy comparable energy.  ``service="full"`` asks for each EV's need, or
    as much as full power can deliver before departure and the horizon end.
    Aggregators pay the per-slot locational prices read from the duals.
    """
    import cvxpy as cp
    import scipy.sparse as sp

    if service not in ("matched", "full"):
        raise ValueError(f"unknown service level {service!r}")
    if service == "matched" and reference is None:
        reference = run_online(scenario)
    started = time.perf_counter()
    params = scenario.params
    net = scenario.network
    T = params.horizon
    agents = [_Agent(spec, params, scenario.V) for spec in scenario.aggregators]
    K = len(agents)
    served = delivered_energy(reference) if service == "matched" else None

    # one column per (EV, parked slot inside the horizon)
    col_t, col_k, col_ev, caps = [], [], [], []
    lower, upper = [], []
    ev_index = []  # (k, i) per EV row
    for k, a in enumerate(agents):
        fl = a.fleet
        reach, need = offline_targets(fl, T)
        want = reach if served is None else np.minimum(served[k], need)
        for i in range(len(fl)):
            r = len(ev_index)
            ev_index.append((k, i))
            lower.append(want[i])
            upper.append(need[i])
            # EVs owed nothing would only be charged at a loss; leave them out
            if need[i] <= ENERGY_TOL or want[i] <= ENERGY_TOL:
                continue
            for t in range(max(int(fl.arrival[i]), 0), int(min(fl.departure[i], T))):
                col_t.append(t)
                col_k.append(k)
                col_ev.append(r)
                caps.append(fl.power_cap[i])
    nv = len(col_t)
    col_t, col_k, col_ev = (np.array(v, dtype=int) for v in (col_t, col_k, col_ev))
    gen_a = np.array([g.a for g in net.generators])
    gen_b = np.array([g.b for g in net.generators])
    pmin = np.array([g.pmin for g in net.generators])
    pmax = np.array([g.pmax for g in net.generators])
    loads = np.array([net.load_vector(t) for t in range(T)])

    pg = cp.Variable((T, len(net.generators)))
    cons = []
    for bound, sign in ((pmin, 1), (pmax, -1)):
        fin = np.isfinite(bound)
        if fin.any():
            lhs = sign * pg[:, fin]
            cons.append(lhs >= sign * np.broadcast_to(bound[fin], (T, int(fin.sum()))))
    if nv:
        pv = cp.Variable(nv)
        cons += [pv >= 0, pv <= np.array(caps)]
        to_slot = sp.csr_matrix((np.ones(nv), (col_t * K + col_k, np.arange(nv))), shape=(T * K, nv))
        # a separate allocation variable keeps line rows from touching every EV column
        X = cp.Variable((T, K))
        cons.append(cp.reshape(X, (T * K,), order="C") == to_slot @ pv)
        to_ev = sp.csr_matrix((np.full(nv, params.slot_gain), (col_ev, np.arange(nv))),
                              shape=(len(ev_index), nv))
        rows = np.unique(col_ev)
        got = (to_ev @ pv)[rows]
        lo, hi = np.array(lower)[rows], np.array(upper)[rows]
        cons += [got >= lo, got <= np.maximum(hi, lo)]
        agg_total = cp.sum(X, axis=1)
    else:
        X = None
        agg_total = 0.0
    balance = cp.sum(pg, axis=1) - agg_total == loads.sum(axis=1)
    cons.append(balance)
    lim = net.limits
    finite = np.nonzero(np.isfinite(lim))[0]
    line_cons = []
    if finite.size:
        gen_ptdf = np.array([net.ptdf[g.bus, finite] for g in net.generators])
        flow = pg @ gen_ptdf - loads @ net.ptdf[:, finite]
        if X is not None:
            flow = flow - X @ np.array([net.ptdf[a.spec.bus, finite] for a in agents])
        bound = np.broadcast_to(lim[finite], (T, finite.size))
        line_cons = [flow <= bound, -flow <= bound]
        cons += line_cons
    prob = cp.Problem(cp.Minimize(cp.sum(cp.square(pg) @ gen_a) + cp.sum(pg @ gen_b)), cons)
    try:
        prob.solve(solver=cp.CLARABEL, **_solver_opts)
    except (cp.error.SolverError, TypeError, ValueError):
        prob.solve(solver=cp.CLARABEL)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise market.MarketInfeasibleError(f"offline horizon problem is {prob.status}")
    lam = -np.asarray(balance.dual_value, dtype=float).reshape(T)
    chi_hi = np.zeros((T, len(lim)))
    chi_lo = np.zeros((T, len(lim)))
    if line_cons:
        chi_hi[:, finite] = line_cons[0].dual_value
        chi_lo[:, finite] = line_cons[1].dual_value
    prices = np.zeros((T, K))
    for k, a in enumerate(agents):
        prices[:, k] = lam + (chi_lo - chi_hi) @ net.ptdf[a.spec.bus]

    # per-EV schedules, nudged so solver round-off does not miss targets by 1e-9 kWh
    sched = [np.zeros((len(a.fleet), T)) for a in agents]
    if nv:
        vals = np.clip(pv.value, 0.0, np.array(caps))
        for r, (k, i) in enumerate(ev_index):
            m = col_ev == r
            if not m.any():
                continue
            p, cap = vals[m], np.array(caps)[m]
            short = lower[r] / params.slot_gain - p.sum()
            excess = p.sum() - upper[r] / params.slot_gain
            if short > 0:
                p = p + (cap - p) * min(1.0, short / max((cap - p).sum(), 1e-300))
            elif excess > 0:
                p = p * (1.0 - excess / p.sum())
            sched[k][i, col_t[m]] = p
    alloc = np.array([s.sum(axis=0) for s in sched]).T.reshape(T, K)
    costs = prices * alloc * params.dt
    metrics = []
    for t in range(T):
        for k, a in enumerate(agents):
            arr, gcaps = a.fleet.group_series(t)
            a.queues.observe(arr, gcaps)
            p = np.minimum(sched[k][:, t], a.fleet.max_powers(t))
            newly = a.fleet.step(p, t)
            a.queues.advance(a.fleet.group_sum(p), arr, a.sched)
            a.cost_cum += costs[t, k]
            metrics.append(SlotMetrics(t=t, agg_id=a.spec.name, lmp=float(prices[t, k]),
                                       x=float(alloc[t, k]), cost=float(costs[t, k]),
                                       cost_cum=a.cost_cum, q_total=float(a.queues.q.sum()),
                                       z_total=float(a.queues.z.sum()),
                                       completed=int(a.fleet.completed().sum()),
                                       completion_events=newly))
    summary = _summary("b1", agents, costs, alloc, params, started, scenario.V, scenario.seed)
    return RunResult(summary, metrics, [a.fleet for a in agents], costs, prices, alloc)


def run_benchmark_b2(scenario, **kw):
    return run_online(scenario, strategy="b2", **kw)


def run_benchmark_b3(scenario, **kw):
    return run_online(scenario, strategy="b3", **kw)


def run_strategy(scenario, strategy, **kw):
    if strategy == "b1":
        return run_offline_oracle(scenario, reference=run_online(scenario, **kw))
    return run_online(scenario, strategy=strategy, **kw)


def compare(scenario):
    """Proposed method and the three benchmarks, in that order."""
    online = run_online(scenario)
    offline = run_offline_oracle(scenario, reference=online)
    online.summary.realized_gap = (online.summary.total_cost - offline.summary.total_cost) \
        / scenario.params.horizon
    return {"online": online, "b1": offline,
            "b2": run_benchmark_b2(scenario), "b3": run_benchmark_b3(scenario)}


def comparison_table(results):
    """Rows of (strategy, total cost, cost relative to b1, unit cost)."""
    ref = results["b1"].summary.total_cost
    rows = []
    for name in ("online", "b1", "b2", "b3"):
        s = results[name].summary
        rel = s.total_cost / ref if ref else (1.0 if s.total_cost == 0 else float("inf"))
        rows.append((name, s.total_cost, rel, s.unit_cost))
    return rows


def sweep(scenario, parameter, values):
    """Online runs over a range of ``V`` or ``alpha`` values."""
    if parameter not in ("V", "alpha"):
        raise ValueError("sweep parameter must be 'V' or 'alpha'")
    out = {}
    for v in values:
        kw = {"V": v} if parameter == "V" else {"alpha": v}
        out[v] = run_online(scenario, **kw).summary
    return out


def mean_delay(summary: RunSummary):
    return float(np.mean(list(summary.mean_delay.values()))) if summary.mean_delay else 0.0
