"""EV fleet model: charging jobs, group-level arrival series and caps, FIFO dispatch.

All powers are in kW, energies in kWh and times in slots of ``dt`` hours.
Energy conversion (``eta * p * dt``) happens only in :func:`step_energy` and
the closure helpers, so arrival rates and caps stay pure power quantities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ENERGY_TOL = 1e-9


@dataclass(frozen=True)
class FleetParams:
    eta: float = 0.95
    dt: float = 1.0 / 12.0
    horizon: int = 288

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must be in (0, 1], got {self.eta}")
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")

    @property
    def slot_gain(self):
        """kWh stored per kW drawn over one slot."""
        return self.eta * self.dt


@dataclass
class EvTask:
    id: object
    arrival_slot: int
    departure_slot: int
    energy_arrival: float
    energy_target: float
    energy_min: float
    energy_max: float
    power_cap: float
    energy_now: float | None = None

    def __post_init__(self):
        if self.energy_now is None:
            self.energy_now = self.energy_arrival
        if not self.arrival_slot < self.departure_slot:
            raise ValueError(f"EV {self.id}: arrival_slot must precede departure_slot")
        if not (self.energy_min <= self.energy_arrival <= self.energy_target <= self.energy_max):
            raise ValueError(f"EV {self.id}: need energy_min <= energy_arrival "
                             f"<= energy_target <= energy_max")
        if self.power_cap <= 0.0:
            raise ValueError(f"EV {self.id}: power_cap must be positive")

    @property
    def need(self):
        return self.energy_target - self.energy_arrival

    @property
    def parking_duration(self):
        return self.departure_slot - self.arrival_slot


@dataclass(frozen=True)
class GroupSpec:
    group_id: int
    parking_duration: int
    alpha: float = 1.0
    members: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError(f"group {self.group_id}: alpha must be positive")
        if self.parking_duration < 1:
            raise ValueError(f"group {self.group_id}: parking_duration must be >= 1")


def _slots_needed(need, power_cap, params):
    ratio = np.asarray(need, dtype=float) / (np.asarray(power_cap, dtype=float) * params.slot_gain)
    # exact multiples of one full slot map to themselves, not to the next integer
    return np.where(ratio <= 0.0, 0, np.ceil(ratio - 1e-9)).astype(int)


def min_charge_slots(ev: EvTask, params: FleetParams) -> int:
    """Number of slots to deliver the EV's need at full power (0 for zero need)."""
    return int(_slots_needed(ev.need, ev.power_cap, params))


def end_slot_power(ev: EvTask, params: FleetParams) -> float:
    n = min_charge_slots(ev, params)
    if n < 1:
        raise ValueError(f"EV {ev.id} has no charging need")
    return ev.need / params.slot_gain - (n - 1) * ev.power_cap


def arrival_rate(ev: EvTask, t: int, params: FleetParams) -> float:
    """Charging-task arrival (kW) the EV contributes to its group queue at slot ``t``.

    Full power for the first ``T_min - 1`` slots after arrival and the residual
    power in slot ``T_a + T_min - 1``, so the series integrates to the need.
    """
    n = min_charge_slots(ev, params)
    k = t - ev.arrival_slot
    if n == 0 or k < 0 or k >= n:
        return 0.0
    if k < n - 1:
        return float(ev.power_cap)
    return end_slot_power(ev, params)


def max_power(ev: EvTask, t: int, params: FleetParams, energy: float | None = None) -> float:
    """Largest admissible charging power at slot ``t`` given the current energy."""
    e = ev.energy_now if energy is None else energy
    if not ev.arrival_slot <= t < ev.departure_slot:
        return 0.0
    headroom = ev.energy_target - e
    if headroom <= ENERGY_TOL:
        return 0.0
    if headroom >= ev.power_cap * params.slot_gain:
        return float(ev.power_cap)
    return headroom / params.slot_gain


def step_energy(ev: EvTask, p_v: float, params: FleetParams) -> float:
    """Advance the EV's energy by one slot of charging at ``p_v`` kW and return it."""
    if p_v < -ENERGY_TOL:
        raise ValueError(f"EV {ev.id}: negative charging power {p_v}")
    e = ev.energy_now + params.slot_gain * max(p_v, 0.0)
    if e > ev.energy_max + ENERGY_TOL:
        raise ValueError(f"EV {ev.id}: energy {e:.6f} exceeds energy_max {ev.energy_max}")
    ev.energy_now = min(e, ev.energy_max)
    return ev.energy_now


def assign_groups(durations: Sequence[int], group_durations: Sequence[int]) -> np.ndarray:
    """Map parking durations to group indices.

    Exact matches win; otherwise the nearest longer group is used, and
    durations beyond every group fall into the longest one.
    """
    gd = np.asarray(group_durations)
    order = np.argsort(gd, kind="stable")
    sorted_d = gd[order]
    idx = np.searchsorted(sorted_d, np.asarray(durations), side="left")
    idx = np.minimum(idx, len(gd) - 1)
    return order[idx]


class Fleet:
    """Vectorized state of all EVs served by one aggregator."""

    def __init__(self, evs: Sequence[EvTask], groups: Sequence[GroupSpec], params: FleetParams):
        self.params = params
        self.groups = list(groups)
        self.evs = list(evs)
        n = len(self.evs)
        self.ids = [ev.id for ev in self.evs]
        self.arrival = np.array([ev.arrival_slot for ev in self.evs], dtype=int)
        self.departure = np.array([ev.departure_slot for ev in self.evs], dtype=int)
        self.e_arrival = np.array([ev.energy_arrival for ev in self.evs], dtype=float)
        self.e_target = np.array([ev.energy_target for ev in self.evs], dtype=float)
        self.e_max = np.array([ev.energy_max for ev in self.evs], dtype=float)
        self.power_cap = np.array([ev.power_cap for ev in self.evs], dtype=float)
        self.energy = np.array([ev.energy_now for ev in self.evs], dtype=float)
        self.t_min = _slots_needed(self.e_target - self.e_arrival, self.power_cap, params)
        self.p_end = np.where(self.t_min > 0,
                              (self.e_target - self.e_arrival) / params.slot_gain
                              - (self.t_min - 1) * self.power_cap, 0.0)
        self.group_of = np.zeros(n, dtype=int)
        pos = {ev_id: i for i, ev_id in enumerate(self.ids)}
        seen = set()
        for g, grp in enumerate(self.groups):
            for m in grp.members:
                if m not in pos:
                    raise KeyError(f"group {grp.group_id} references unknown EV {m!r}")
                if m in seen:
                    raise ValueError(f"EV {m!r} belongs to more than one group")
                seen.add(m)
                self.group_of[pos[m]] = g
        if len(seen) != n:
            missing = [i for i in self.ids if i not in seen]
            raise ValueError(f"EVs without a group: {missing[:5]}")
        # FIFO order: earliest arrival first, then declaration order
        self.fifo = np.lexsort((np.arange(n), self.arrival))
        done = self.e_target - self.energy <= ENERGY_TOL
        self.completed_at = np.where(done, self.arrival - 1, -1)

    @property
    def n_groups(self):
        return len(self.groups)

    def __len__(self):
        return len(self.evs)

    def arrival_rates(self, t):
        k = t - self.arrival
        full = (k >= 0) & (k < self.t_min - 1)
        last = (k >= 0) & (k == self.t_min - 1)
        return np.where(full, self.power_cap, np.where(last, self.p_end, 0.0))

    def max_powers(self, t):
        parked = (self.arrival <= t) & (t < self.departure)
        headroom = self.e_target - self.energy
        cap = np.minimum(self.power_cap, np.maximum(headroom, 0.0) / self.params.slot_gain)
        return np.where(parked & (headroom > ENERGY_TOL), cap, 0.0)

    def group_sum(self, values):
        return np.bincount(self.group_of, weights=values, minlength=self.n_groups)

    def group_series(self, t):
        """Per-group (arrival rate, power cap) at slot ``t``."""
        return self.group_sum(self.arrival_rates(t)), self.group_sum(self.max_powers(t))

    def disaggregate(self, x_g, t, caps=None):
        """Split group powers over members earliest-arrival-first."""
        caps = self.max_powers(t) if caps is None else caps
        x_g = np.asarray(x_g, dtype=float)
        totals = self.group_sum(caps)
        tol = 1e-9 * (1.0 + totals)
        if np.any(x_g > totals + tol) or np.any(x_g < -tol):
            raise ValueError("group dispatch outside [0, X_g]")
        remaining = np.clip(x_g, 0.0, totals)
        p = np.zeros(len(self.evs))
        for i in self.fifo:
            if caps[i] <= 0.0:
                continue
            g = self.group_of[i]
            take = min(caps[i], remaining[g])
            p[i] = take
            remaining[g] -= take
        return p

    def disaggregate_total(self, x_total, t, caps=None):
        """FIFO split of an aggregator-level total across all parked EVs."""
        caps = self.max_powers(t) if caps is None else caps
        remaining = float(np.clip(x_total, 0.0, caps.sum()))
        p = np.zeros(len(self.evs))
        for i in self.fifo:
            if remaining <= 0.0:
                break
            take = min(caps[i], remaining)
            p[i] = take
            remaining -= take
        return p

    def step(self, p, t):
        """Apply one slot of charging; returns the number of EVs completing now."""
        if np.any(p < -ENERGY_TOL):
            raise ValueError("negative charging power")
        e = self.energy + self.params.slot_gain * np.maximum(p, 0.0)
        if np.any(e > self.e_max + ENERGY_TOL):
            raise ValueError("charging beyond energy_max; dispatch exceeds caps")
        self.energy = np.minimum(e, self.e_max)
        newly = (self.completed_at < 0) & (self.e_target - self.energy <= ENERGY_TOL)
        self.completed_at[newly] = t
        for i in np.nonzero(p)[0]:
            self.evs[i].energy_now = self.energy[i]
        return int(newly.sum())

    def delays(self, horizon=None):
        """Slots from arrival until the need was met.

        EVs still short of target at the end of the run report the elapsed
        time since arrival, a lower bound on their eventual delay.
        """
        horizon = self.params.horizon if horizon is None else horizon
        done = self.completed_at >= 0
        return np.where(done, self.completed_at + 1 - self.arrival,
                        np.maximum(horizon - self.arrival, 0))

    def completed(self):
        """EVs that reached their target before departing."""
        return (self.completed_at >= 0) & (self.completed_at < self.departure)


def group_series(group: GroupSpec, fleet: Fleet, t: int):
    g = fleet.groups.index(group)
    a, x = fleet.group_series(t)
    return float(a[g]), float(x[g])


def disaggregate(group: GroupSpec, fleet: Fleet, x_g: float, t: int):
    """FIFO split of one group's power; returns {ev_id: kW} for the group's members."""
    g = fleet.groups.index(group)
    x = np.zeros(fleet.n_groups)
    caps = fleet.max_powers(t)
    x[g] = x_g
    if x_g > caps[fleet.group_of == g].sum() * (1 + 1e-12) + 1e-12:
        raise ValueError(f"x_g={x_g} exceeds the group's cap")
    p = fleet.disaggregate(x, t, caps)
    return {fleet.ids[i]: float(p[i]) for i in np.nonzero(fleet.group_of == g)[0]}


def group_caps_bound(fleet: Fleet):
    """A-priori per-group upper bounds on X_g(t): sum of member power caps."""
    return fleet.group_sum(fleet.power_cap)
