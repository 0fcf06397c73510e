"""Virtual queues and the per-slot drift-plus-penalty charging decision.

Each group carries a demand queue ``q`` fed by task arrivals and a delay
queue ``z`` that grows by ``alpha/R`` every slot the demand queue is
non-empty.  The per-slot problem

    min_x  sum_g (V*price - q_g - z_g) x_g + x_g**2 / 2,   0 <= x_g <= X_g

separates by group and has the closed form ``clip(q + z - V*price, 0, X)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SchedulerParams:
    V: float
    alpha: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.atleast_1d(np.asarray(self.alpha, dtype=float)))
        object.__setattr__(self, "R", np.atleast_1d(np.asarray(self.R, dtype=float)))
        if self.V <= 0:
            raise ValueError(f"V must be positive, got {self.V}")
        if np.any(self.alpha <= 0):
            raise ValueError("alpha must be positive for every group")
        if np.any(self.R < 1):
            raise ValueError("R must be >= 1 for every group")
        if self.alpha.shape != self.R.shape:
            raise ValueError("alpha and R must have one entry per group")


@dataclass
class QueueState:
    q: np.ndarray
    z: np.ndarray
    q_max_seen: np.ndarray = None
    z_max_seen: np.ndarray = None
    a_max_seen: np.ndarray = None
    x_cap_max_seen: np.ndarray = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).copy()
        self.z = np.asarray(self.z, dtype=float).copy()
        if np.any(self.q < 0) or np.any(self.z < 0):
            raise ValueError("queues must be non-negative")
        for name, init in (("q_max_seen", self.q), ("z_max_seen", self.z),
                           ("a_max_seen", np.zeros_like(self.q)),
                           ("x_cap_max_seen", np.zeros_like(self.q))):
            if getattr(self, name) is None:
                setattr(self, name, init.copy())

    @classmethod
    def empty(cls, n_groups):
        return cls(np.zeros(n_groups), np.zeros(n_groups))

    @property
    def backlog(self):
        return self.q + self.z

    def observe(self, arrivals, caps):
        """Fold this slot's arrivals and caps into the running maxima."""
        self.a_max_seen = np.maximum(self.a_max_seen, arrivals)
        self.x_cap_max_seen = np.maximum(self.x_cap_max_seen, caps)

    def advance(self, x, arrivals, params: SchedulerParams):
        """Apply both queue updates for one slot (``z`` sees the pre-update ``q``)."""
        z_next = update_z(self.z, self.q, x, params.alpha, params.R)
        self.q = update_q(self.q, x, arrivals)
        self.z = z_next
        self.q_max_seen = np.maximum(self.q_max_seen, self.q)
        self.z_max_seen = np.maximum(self.z_max_seen, self.z)


def update_q(q, x, a):
    return np.maximum(np.asarray(q, dtype=float) - x, 0.0) + a


def update_z(z, q, x, alpha, R):
    busy = (np.asarray(q) > 0).astype(float)
    return np.maximum(np.asarray(z, dtype=float) + (np.asarray(alpha) / np.asarray(R)) * busy - x, 0.0)


def solve_p2(price, queues: QueueState, caps, params: SchedulerParams):
    """Optimal group charging powers at ``price`` (closed form of the per-slot QP)."""
    if price < 0:
        raise ValueError(f"price must be non-negative, got {price}")
    caps = np.asarray(caps, dtype=float)
    return np.clip(queues.backlog - params.V * price, 0.0, caps)


def solve_p2_linear(price, queues: QueueState, caps, params: SchedulerParams, total=None):
    """Bang-bang response of the linearized per-slot problem.

    Groups whose threshold ``(q+z)/V`` exceeds the price charge fully; groups
    exactly at the threshold are indifferent, and when a cleared ``total`` is
    given they absorb whatever the strict groups leave over.
    """
    caps = np.asarray(caps, dtype=float)
    w_hi = queues.backlog / params.V
    tol = 1e-9 * max(1.0, abs(price))
    strict = w_hi > price + tol
    x = np.where(strict, caps, 0.0)
    if total is not None:
        tied = np.abs(w_hi - price) <= tol
        spare = max(0.0, total - x.sum())
        tied_caps = np.where(tied & ~strict, caps, 0.0)
        if tied_caps.sum() > 0:
            x = x + tied_caps * min(1.0, spare / tied_caps.sum())
    return x


def delay_bound(group, queues: QueueState, params: SchedulerParams):
    """Worst-case charging delay (slots) implied by the observed queue maxima."""
    g = group
    return params.R[g] * (queues.q_max_seen[g] + queues.z_max_seen[g]) / params.alpha[g]


@dataclass
class GapConstants:
    """Per-group constants of the optimality-gap bound (arrival, backlog and cap maxima)."""
    A: np.ndarray
    Q: np.ndarray
    Z: np.ndarray
    X_bar: np.ndarray

    @classmethod
    def from_queues(cls, queues: QueueState):
        return cls(queues.a_max_seen.copy(), queues.q_max_seen.copy(),
                   queues.z_max_seen.copy(), queues.x_cap_max_seen.copy())


def drift_constant(params: SchedulerParams, c: GapConstants):
    step = params.alpha / params.R
    return float(np.sum(c.A ** 2 / 2 + c.Q * c.A + step * c.Z)
                 + 0.5 * np.sum(np.maximum(step ** 2, c.X_bar ** 2)))


def gap_bound(params: SchedulerParams, constants: GapConstants):
    """Bound on time-average (online - offline) cost: (M + sum X_bar^2 / 2) / V."""
    m_tilde = drift_constant(params, constants) + 0.5 * float(np.sum(constants.X_bar ** 2))
    return m_tilde / params.V
