"""Desk-scale exact and entropic optimal transport.

Ground truth for equivalence tests and the stand-in for full optimal
transport on tiny instances. `exact_ot` solves the transportation LP with
HiGHS; `sinkhorn` runs log-domain matrix scaling and rounds the result
onto the transport polytope, so returned plans always satisfy the
marginal constraints and their cost upper-bounds the exact optimum.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog
from scipy.special import logsumexp

from .errors import InfeasibleInput, SizeLimit

SIZE_CAP = 10_000
SIMPLEX_ATOL = 1e-9


@dataclass(frozen=True)
class TransportPlan:
    """Coupling matrix in U(a, b) with its total transport cost."""

    coupling: np.ndarray
    cost: float
    converged: bool = True


def _check_simplex(vec, name: str) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise InfeasibleInput(f"{name} is empty")
    if np.any(v < 0):
        raise InfeasibleInput(f"{name} has negative entries")
    total = v.sum()
    if abs(total - 1.0) > SIMPLEX_ATOL:
        raise InfeasibleInput(f"{name} sums to {total!r}, not a simplex vector")
    return v / total


def _check_cost(cost_matrix, n: int, m: int) -> np.ndarray:
    c = np.asarray(cost_matrix, dtype=np.float64)
    if c.shape != (n, m):
        raise InfeasibleInput(f"cost matrix is {c.shape}, expected ({n}, {m})")
    if np.any(c < 0):
        raise InfeasibleInput("cost matrix has negative entries")
    return c


def exact_ot(a, b, cost_matrix) -> TransportPlan:
    """Exact optimal transport between two simplex vectors.

    Solves min <T, C> over the transport polytope U(a, b) as a linear
    program; desk scale only (n*m <= SIZE_CAP).
    """
    a = _check_simplex(a, "a")
    b = _check_simplex(b, "b")
    n, m = a.size, b.size
    if n * m > SIZE_CAP:
        raise SizeLimit(f"{n}x{m} exceeds the desk-scale cap of {SIZE_CAP} cells")
    c = _check_cost(cost_matrix, n, m)
    row_marg = sp.kron(sp.eye(n, format="csr"), np.ones((1, m)), format="csr")
    col_marg = sp.kron(np.ones((1, n)), sp.eye(m, format="csr"), format="csr")
    res = linprog(
        c.ravel(),
        A_eq=sp.vstack([row_marg, col_marg], format="csr"),
        b_eq=np.concatenate([a, b]),
        bounds=(0, None),
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = res.x.reshape(n, m)
    return TransportPlan(plan, float(res.fun))


def _round_to_polytope(plan, a, b) -> np.ndarray:
    """Project an almost-feasible plan onto U(a, b) (scale rows/cols, then
    spread the leftover mass as a rank-one correction)."""
    t = plan.copy()
    rows = t.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(rows > 0, np.minimum(1.0, a / rows), 1.0)
    t *= scale[:, None]
    cols = t.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(cols > 0, np.minimum(1.0, b / cols), 1.0)
    t *= scale[None, :]
    err_a = a - t.sum(axis=1)
    err_b = b - t.sum(axis=0)
    total = err_a.sum()
    if total > 0:
        t += np.outer(err_a, err_b) / total
    return t


def sinkhorn(a, b, cost_matrix, epsilon: float, max_iter: int = 1000,
             tol: float = 1e-6) -> TransportPlan:
    """Entropic-regularized transport by log-domain alternating scaling.

    Iterates until the unmatched marginal violation drops below ``tol``
    (or ``max_iter`` is hit, in which case the best iterate is returned
    with ``converged=False`` and a warning). The plan is rounded onto
    U(a, b) before costing, so its cost never undercuts `exact_ot`.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    a = _check_simplex(a, "a")
    b = _check_simplex(b, "b")
    n, m = a.size, b.size
    c = _check_cost(cost_matrix, n, m)
    with np.errstate(divide="ignore"):
        log_a = np.log(a)
        log_b = np.log(b)
    neg_c = -c / epsilon
    f = np.zeros(n)
    g = np.zeros(m)
    converged = False
    for _ in range(max_iter):
        f = epsilon * (log_a - logsumexp(neg_c + g[None, :] / epsilon, axis=1))
        f[a == 0] = -np.inf
        g = epsilon * (log_b - logsumexp(neg_c + f[:, None] / epsilon, axis=0))
        g[b == 0] = -np.inf
        with np.errstate(invalid="ignore"):
            plan = np.exp(neg_c + f[:, None] / epsilon + g[None, :] / epsilon)
        plan = np.nan_to_num(plan, nan=0.0)
        violation = max(np.abs(plan.sum(axis=1) - a).max(),
                        np.abs(plan.sum(axis=0) - b).max())
        if violation < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"sinkhorn did not converge in {max_iter} iterations "
                      f"(violation {violation:.2e})")
    plan = _round_to_polytope(plan, a, b)
    return TransportPlan(plan, float(np.sum(plan * c)), converged)
