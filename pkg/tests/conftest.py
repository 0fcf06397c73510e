import itertools

import numpy as np
import pytest

from evbid import solver


def random_qp(rng, n=None, lp=False):
    """Feasible, bounded random instance: diagonal PSD cost, box plus random rows."""
    n = int(rng.integers(1, 21)) if n is None else n
    x0 = rng.uniform(-1, 1, n)
    diag = np.zeros(n) if lp else rng.uniform(0, 3, n) * (rng.random(n) < 0.7)
    c = rng.normal(size=n)
    m_eq = int(rng.integers(0, min(3, n) + 1))
    A = rng.normal(size=(m_eq, n))
    b = A @ x0
    m_in = int(rng.integers(0, 2 * n + 1))
    G = rng.normal(size=(m_in, n))
    h = G @ x0 + rng.uniform(0, 1, m_in) * (rng.random(m_in) < 0.6)
    box = 2.0
    G = np.vstack([G, np.eye(n), -np.eye(n)])
    h = np.concatenate([h, np.full(n, box), np.full(n, box)])
    return solver.QpProblem(np.diag(diag), c, A, b, G, h)


def scaled_kkt(problem, sol):
    r = solver.kkt_residuals(problem, sol)
    scale = 1.0 + np.abs(problem.linear).max(initial=0.0)
    r["stationarity"] /= scale
    return r


def lp_vertices(problem):
    """Every basic feasible point: equality rows plus any n - m_eq inequality rows active."""
    n = problem.n
    A, b = problem.eq_matrix, problem.eq_rhs
    G, h = problem.ineq_matrix, problem.ineq_rhs
    need = n - A.shape[0]
    best = None
    for rows in itertools.combinations(range(G.shape[0]), need):
        M = np.vstack([A, G[list(rows)]])
        rhs = np.concatenate([b, h[list(rows)]])
        if abs(np.linalg.det(M)) < 1e-10:
            continue
        x = np.linalg.solve(M, rhs)
        if np.all(G @ x <= h + 1e-9) and np.allclose(A @ x, b, atol=1e-9):
            val = float(problem.linear @ x)
            best = val if best is None else min(best, val)
    return best


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
