"""Dense primal active-set solver for small convex QPs and LPs.

Problems have the form::

    minimize    1/2 x'Hx + c'x
    subject to  A x  = b
                G x <= h

with ``H`` symmetric positive semidefinite.  The solver works on a null-space
representation of the working set, so a singular ``H`` (including ``H = 0``)
is handled by stepping along zero-curvature descent rays until a constraint
blocks.  Duals follow the sign convention of the Lagrangian

    L(x, y, mu) = 1/2 x'Hx + c'x + y'(Ax - b) + mu'(Gx - h),   mu >= 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-8
STAT_TOL = 1e-8
PIVOT_TOL = 1e-12

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration_limit"


class SolverError(RuntimeError):
    pass


def _as_matrix(m, n):
    if m is None:
        return np.zeros((0, n))
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        m = m.reshape(1, -1) if m.size else np.zeros((0, n))
    return m


def _as_vector(v, size):
    if v is None:
        return np.zeros(size)
    return np.asarray(v, dtype=float).reshape(-1)


@dataclass
class QpProblem:
    quadratic: np.ndarray
    linear: np.ndarray
    eq_matrix: np.ndarray | None = None
    eq_rhs: np.ndarray | None = None
    ineq_matrix: np.ndarray | None = None
    ineq_rhs: np.ndarray | None = None

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=float).reshape(-1)
        n = self.linear.size
        if self.quadratic is None:
            self.quadratic = np.zeros((n, n))
        self.quadratic = np.asarray(self.quadratic, dtype=float)
        if self.quadratic.ndim == 1:
            self.quadratic = np.diag(self.quadratic)
        self.eq_matrix = _as_matrix(self.eq_matrix, n)
        self.eq_rhs = _as_vector(self.eq_rhs, self.eq_matrix.shape[0])
        self.ineq_matrix = _as_matrix(self.ineq_matrix, n)
        self.ineq_rhs = _as_vector(self.ineq_rhs, self.ineq_matrix.shape[0])
        if self.quadratic.shape != (n, n):
            raise ValueError(f"quadratic must be {n}x{n}, got {self.quadratic.shape}")
        if not np.allclose(self.quadratic, self.quadratic.T, atol=1e-12):
            raise ValueError("quadratic must be symmetric")
        for name, mat, rhs in (("eq", self.eq_matrix, self.eq_rhs),
                               ("ineq", self.ineq_matrix, self.ineq_rhs)):
            if mat.shape[1] != n:
                raise ValueError(f"{name}_matrix has {mat.shape[1]} columns, expected {n}")
            if rhs.size != mat.shape[0]:
                raise ValueError(f"{name}_rhs has {rhs.size} entries, expected {mat.shape[0]}")

    @property
    def n(self):
        return self.linear.size

    def objective(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * x @ self.quadratic @ x + self.linear @ x


@dataclass
class QpSolution:
    primal: np.ndarray
    duals_eq: np.ndarray
    duals_ineq: np.ndarray
    status: str
    objective: float = float("nan")
    iterations: int = 0
    active_set: tuple = field(default_factory=tuple)

    @property
    def optimal(self):
        return self.status == OPTIMAL


def kkt_residuals(problem: QpProblem, sol: QpSolution) -> dict:
    """Stationarity, primal feasibility and complementarity residuals (inf-norm)."""
    x = sol.primal
    grad = problem.quadratic @ x + problem.linear
    grad = grad + problem.eq_matrix.T @ sol.duals_eq + problem.ineq_matrix.T @ sol.duals_ineq
    eq_res = problem.eq_matrix @ x - problem.eq_rhs
    slack = problem.ineq_matrix @ x - problem.ineq_rhs
    return {
        "stationarity": float(np.max(np.abs(grad), initial=0.0)),
        "primal_eq": float(np.max(np.abs(eq_res), initial=0.0)),
        "primal_ineq": float(np.max(slack, initial=0.0)),
        "dual_sign": float(max(0.0, -np.min(sol.duals_ineq, initial=0.0))),
        "complementarity": float(np.max(np.abs(sol.duals_ineq * slack), initial=0.0)),
    }


def _independent_rows(A, tol=1e-10):
    """Indices of a maximal linearly independent subset of rows, in original order."""
    keep = []
    basis = np.zeros((0, A.shape[1]))
    for i, row in enumerate(A):
        if not row.any():
            continue
        cand = np.vstack([basis, row])
        if np.linalg.matrix_rank(cand, tol=tol * max(1.0, np.abs(cand).max())) > basis.shape[0]:
            basis = cand
            keep.append(i)
    return keep


def _null_space(M, n):
    if M.shape[0] == 0:
        return np.eye(n)
    _, s, vt = np.linalg.svd(M)
    rank = int(np.sum(s > PIVOT_TOL * max(1.0, s[0])))
    return vt[rank:].T


class _ActiveSet:
    """Working-set iteration from a feasible starting point."""

    def __init__(self, H, c, A, b, G, h, rule, max_iter):
        self.H, self.c, self.A, self.b, self.G, self.h = H, c, A, b, G, h
        self.rule = rule
        self.max_iter = max_iter
        self.n = c.size
        self.gscale = 1.0 + np.abs(c).max(initial=0.0)

    def multipliers(self, x, W):
        g = self.H @ x + self.c
        M = np.vstack([self.A, self.G[W]]) if W else self.A
        if M.shape[0] == 0:
            return np.zeros(0), np.zeros(0)
        lam, *_ = np.linalg.lstsq(M.T, -g, rcond=None)
        m_eq = self.A.shape[0]
        return lam[:m_eq], lam[m_eq:]

    def direction(self, x, W):
        """Return (p, is_ray).  p = 0 means x is stationary on the working set."""
        g = self.H @ x + self.c
        M = np.vstack([self.A, self.G[W]]) if W else self.A
        Z = _null_space(M, self.n)
        if Z.shape[1] == 0:
            return np.zeros(self.n), False
        Hr = Z.T @ self.H @ Z
        gr = Z.T @ g
        vals, vecs = np.linalg.eigh(Hr)
        hscale = max(1.0, np.abs(vals).max(initial=0.0))
        pos = vals > 1e-10 * hscale
        gt = vecs.T @ gr
        flat = ~pos
        if flat.any() and np.abs(gt[flat]).max() > 1e-11 * self.gscale:
            d = -(vecs[:, flat] @ gt[flat])
            return Z @ d, True
        p = -(vecs[:, pos] @ (gt[pos] / vals[pos])) if pos.any() else np.zeros(Z.shape[1])
        return Z @ p, False

    def blocking(self, x, p, W):
        Gp = self.G @ p
        pnorm = np.linalg.norm(p)
        alpha, block = np.inf, None
        inW = np.zeros(self.G.shape[0], dtype=bool)
        inW[W] = True
        cand = np.nonzero((~inW) & (Gp > PIVOT_TOL * max(pnorm, 1e-300)))[0]
        if cand.size:
            slack = np.maximum(self.h[cand] - self.G[cand] @ x, 0.0)
            ratios = slack / Gp[cand]
            j = int(np.argmin(ratios))  # argmin returns the lowest index on ties
            alpha, block = float(ratios[j]), int(cand[j])
        return alpha, block

    def run(self, x, W, stop=None):
        W = list(W)
        degenerate = 0
        xnorm = lambda v: 1.0 + np.abs(v).max(initial=0.0)
        for it in range(1, self.max_iter + 1):
            if stop is not None and stop(x):
                return x, W, OPTIMAL, it
            p, ray = self.direction(x, W)
            if not ray and np.abs(p).max(initial=0.0) <= 1e-12 * xnorm(x):
                _, mu = self.multipliers(x, W)
                neg = np.nonzero(mu < -1e-11 * self.gscale)[0]
                if neg.size == 0:
                    return x, W, OPTIMAL, it
                if self.rule == "bland" or degenerate > 2 * self.n:
                    drop = min(neg, key=lambda j: W[j])
                else:
                    drop = int(neg[np.argmin(mu[neg])])
                W.pop(int(drop))
                continue
            alpha, block = self.blocking(x, p, W)
            if ray:
                if block is None:
                    return x, W, UNBOUNDED, it
            elif alpha >= 1.0:
                alpha, block = 1.0, None
            degenerate = degenerate + 1 if alpha == 0.0 else 0
            x = x + alpha * p
            if block is not None:
                W.append(block)
        return x, W, ITERATION_LIMIT, self.max_iter

    def to_vertex(self, x, W):
        """For LPs, slide along zero-cost null-space directions until a vertex is reached."""
        for _ in range(self.n):
            M = np.vstack([self.A, self.G[W]]) if W else self.A
            Z = _null_space(M, self.n)
            if Z.shape[1] == 0:
                break
            moved = False
            for d in (Z[:, 0], -Z[:, 0]):
                alpha, block = self.blocking(x, d, W)
                if block is not None:
                    x = x + alpha * d
                    W.append(block)
                    moved = True
                    break
            if not moved:
                break
        return x, W


def _normalize_rows(G, h):
    norms = np.linalg.norm(G, axis=1)
    norms[norms == 0] = 1.0
    return G / norms[:, None], h / norms, norms


def solve_qp(problem: QpProblem, *, rule: str = "dantzig", max_iter: int | None = None,
             vertex: bool = False, debug: bool = False) -> QpSolution:
    """Solve a convex QP with a primal active-set method.

    A phase-one LP on an elastic variable finds a feasible start.  Infeasible
    and unbounded problems are reported through ``status``.
    """
    H, c = problem.quadratic, problem.linear
    n = problem.n
    if np.any(np.linalg.eigvalsh(H) < -1e-10 * max(1.0, np.abs(H).max(initial=0.0))):
        raise ValueError("quadratic term is not positive semidefinite")
    G, h, gnorm = _normalize_rows(problem.ineq_matrix, problem.ineq_rhs)
    zero_rows = np.linalg.norm(problem.ineq_matrix, axis=1) == 0
    if np.any(h[zero_rows] < -FEAS_TOL):
        return _failed(problem, INFEASIBLE)
    Araw, braw = problem.eq_matrix, problem.eq_rhs
    keep = _independent_rows(Araw) if Araw.shape[0] else []
    A, b = Araw[keep], braw[keep]
    m_ineq = G.shape[0]
    max_iter = max_iter or 50 * (n + m_ineq + A.shape[0] + 10)

    if A.shape[0]:
        x0, *_ = np.linalg.lstsq(A, b, rcond=None)
        if np.abs(Araw @ x0 - braw).max() > FEAS_TOL * (1.0 + np.abs(braw).max()):
            return _failed(problem, INFEASIBLE)
    else:
        x0 = np.zeros(n)

    viol = G @ x0 - h if m_ineq else np.zeros(0)
    iters = 0
    if m_ineq and viol.max() > 0.0:
        # phase one: min s  s.t.  A x = b,  G x - s <= h,  -s <= 0
        G1 = np.block([[G, -np.ones((m_ineq, 1))], [np.zeros((1, n)), -np.ones((1, 1))]])
        h1 = np.concatenate([h, [0.0]])
        A1 = np.hstack([A, np.zeros((A.shape[0], 1))])
        c1 = np.zeros(n + 1)
        c1[-1] = 1.0
        phase1 = _ActiveSet(np.zeros((n + 1, n + 1)), c1, A1, b, G1, h1, "bland", max_iter)
        z0 = np.concatenate([x0, [viol.max()]])
        z, W1, status, it1 = phase1.run(z0, [], stop=lambda z: z[-1] <= 0.0)
        iters += it1
        if status != OPTIMAL or z[-1] > FEAS_TOL:
            return _failed(problem, INFEASIBLE, iters)
        x0 = z[:n]

    engine = _ActiveSet(H, c, A, b, G, h, rule, max_iter)
    x, W, status, it2 = engine.run(x0, [])
    iters += it2
    if status != OPTIMAL:
        if debug:
            logger.debug("solve_qp status=%s after %d iterations", status, iters)
        return _failed(problem, status, iters)
    if vertex:
        x, W = engine.to_vertex(x, W)
    y_keep, mu_w = engine.multipliers(x, W)
    mu = np.zeros(m_ineq)
    mu[W] = np.maximum(mu_w, 0.0)
    mu = mu / gnorm if m_ineq else mu
    y = np.zeros(Araw.shape[0])
    y[keep] = y_keep
    sol = QpSolution(primal=x, duals_eq=y, duals_ineq=mu, status=OPTIMAL,
                     objective=float(problem.objective(x)), iterations=iters,
                     active_set=tuple(sorted(W)))
    if debug:
        logger.debug("solve_qp optimal in %d iterations, active=%s, kkt=%s",
                     iters, sol.active_set, kkt_residuals(problem, sol))
    return sol


def solve_lp(problem: QpProblem, **kwargs) -> QpSolution:
    """Vertex-optimal LP solution using Bland's rule for anti-cycling."""
    if np.abs(problem.quadratic).max(initial=0.0) != 0.0:
        raise ValueError("solve_lp requires a zero quadratic term")
    kwargs.setdefault("rule", "bland")
    kwargs.setdefault("vertex", True)
    return solve_qp(problem, **kwargs)


def _failed(problem, status, iterations=0):
    n = problem.n
    return QpSolution(primal=np.full(n, np.nan), duals_eq=np.zeros(problem.eq_matrix.shape[0]),
                      duals_ineq=np.zeros(problem.ineq_matrix.shape[0]), status=status,
                      iterations=iterations)
