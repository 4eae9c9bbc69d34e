"""Dense two-phase revised simplex for small linear programs.

Solves ``min c @ x`` subject to ``A_ub @ x <= b_ub``, ``A_eq @ x == b_eq`` and
``x >= 0``. Every pivot refactors the basis from the original columns, so
roundoff does not accumulate the way it does in a tableau. Pricing is
Dantzig's rule with a Harris ratio test, switching to Bland's rule after a
run of degenerate pivots so the method cannot cycle. The returned solution
carries residual certificates recomputed from the original data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

__all__ = ["LPResult", "LPError", "solve_lp"]

PIVOT_TOL = 1e-9
FEAS_TOL = 1e-12
BLAND_AFTER = 50


class LPError(RuntimeError):
    pass


@dataclass
class LPResult:
    """Optimal vertex; ``duals`` refer to the rows after sign normalization."""

    x: np.ndarray
    objective: float
    duals: np.ndarray
    reduced_costs: np.ndarray
    dual_residual: float
    primal_residual: float
    iterations: int
    basis: np.ndarray


def _run(A, b, cost, basis, tol, max_iter, start_iter, floor=None):
    """Minimize ``cost @ x`` from the feasible ``basis``; updates it in place.

    With ``floor`` set, stop as soon as the objective value drops to it.
    """
    it = start_iter
    degenerate_run = 0
    allowed = np.ones(A.shape[1], dtype=bool)
    rc_tol = tol * (1.0 + np.abs(cost).max())
    while True:
        lu = lu_factor(A[:, basis])
        xb = lu_solve(lu, b)
        if floor is not None and cost[basis] @ xb <= floor:
            return it
        y = lu_solve(lu, cost[basis], trans=1)
        d = cost - A.T @ y
        d[basis] = 0.0
        candidates = np.flatnonzero((d < -rc_tol) & allowed)
        if candidates.size == 0:
            return it
        bland = degenerate_run > BLAND_AFTER
        col = int(candidates[0]) if bland else int(candidates[np.argmin(d[candidates])])
        u = lu_solve(lu, A[:, col])
        positive = np.flatnonzero(u > PIVOT_TOL)
        if positive.size == 0:
            # a roundoff-sized reduced cost is not a direction of descent
            if d[col] > -1e-9 * (1.0 + np.abs(cost).max()):
                allowed[col] = False
                continue
            raise LPError("linear program is unbounded")
        level = np.maximum(xb[positive], 0.0)
        ratios = level / u[positive]
        if bland:
            ties = positive[ratios <= ratios.min() + FEAS_TOL]
            row = int(ties[np.argmin(basis[ties])])
        else:
            # Harris: among near-minimal ratios take the largest pivot
            bound = np.min((level + FEAS_TOL) / u[positive])
            ok = positive[ratios <= bound]
            row = int(ok[np.argmax(u[ok])])
        degenerate_run = degenerate_run + 1 if xb[row] <= FEAS_TOL else 0
        basis[row] = col
        it += 1
        if it > max_iter:
            raise LPError(f"simplex exceeded {max_iter} pivots")


def solve_lp(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, tol=1e-11, max_iter=50_000) -> LPResult:
    c = np.asarray(c, dtype=np.float64)
    n = c.size
    A_ub = np.zeros((0, n)) if A_ub is None else np.asarray(A_ub, dtype=np.float64)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=np.float64)
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=np.float64)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=np.float64)
    m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
    m = m_ub + m_eq

    # equality standard form with one slack per inequality row
    A = np.zeros((m, n + m_ub))
    A[:m_ub, :n] = A_ub
    A[:m_ub, n:] = np.eye(m_ub)
    A[m_ub:, :n] = A_eq
    b = np.concatenate([b_ub, b_eq])
    cost = np.concatenate([c, np.zeros(m_ub)])
    sign = np.where(b < 0.0, -1.0, 1.0)
    A *= sign[:, None]
    b = b * sign
    n_std = A.shape[1]

    # a slack with +1 can start basic; every other row gets an artificial
    basis = np.full(m, -1, dtype=np.int64)
    for i in range(m_ub):
        if sign[i] > 0.0:
            basis[i] = n + i
    needs_art = np.flatnonzero(basis < 0)
    iterations = 0
    if needs_art.size:
        art = np.zeros((m, needs_art.size))
        art[needs_art, np.arange(needs_art.size)] = 1.0
        basis[needs_art] = n_std + np.arange(needs_art.size)
        A1 = np.hstack([A, art])
        cost1 = np.concatenate([np.zeros(n_std), np.ones(needs_art.size)])
        feas_tol = 1e-9 * max(1.0, np.abs(b).max())
        # phase one is bounded below by zero; stop once the artificials vanish
        iterations = _run(A1, b, cost1, basis, tol, max_iter, iterations, floor=1e-3 * feas_tol)
        lu = lu_factor(A1[:, basis])
        if cost1[basis] @ lu_solve(lu, b) > feas_tol:
            raise LPError("linear program is infeasible")
        # drive remaining artificials out of the basis, dropping redundant rows
        keep = np.ones(m, dtype=bool)
        for i in np.flatnonzero(basis >= n_std):
            lu = lu_factor(A1[:, basis])
            e = np.zeros(m)
            e[i] = 1.0
            row = lu_solve(lu, e, trans=1) @ A
            row[basis[basis < n_std]] = 0.0
            j = int(np.argmax(np.abs(row)))
            if abs(row[j]) > PIVOT_TOL:
                basis[i] = j
            else:
                keep[i] = False
        if not keep.all():
            # a redundant row's artificial stays basic at zero; drop both
            A, b, basis = A[keep], b[keep], basis[keep]
            sign = sign[keep]
        if np.any(basis >= n_std):
            raise LPError("could not remove artificial variables")

    iterations = _run(A, b, cost, basis, tol, max_iter, iterations)

    # recompute the vertex and certificates from the original data
    B = A[:, basis]
    x_std = np.zeros(n_std)
    x_std[basis] = np.linalg.solve(B, b)
    y = np.linalg.solve(B.T, cost[basis])
    reduced = cost - A.T @ y
    x_std[np.abs(x_std) < 1e-15] = 0.0
    dual_residual = float(max(0.0, -reduced.min()))
    primal_residual = float(max(np.abs(A @ x_std - b).max(), max(0.0, -x_std.min())))
    x = x_std[:n]
    return LPResult(
        x=x,
        objective=float(c @ x),
        duals=y,
        reduced_costs=reduced,
        dual_residual=dual_residual,
        primal_residual=primal_residual,
        iterations=iterations,
        basis=basis.copy(),
    )
