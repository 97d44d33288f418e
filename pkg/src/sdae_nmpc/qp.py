"""Condensed QP subproblem of the multiple-shooting SQP.

The equality constraints ``B dw + r = 0`` are square in the state
components, so ``dS = T dU + s0`` with ``T = -B_S^-1 B_U`` and
``s0 = -B_S^-1 r``.  What remains is a bound-constrained QP in the input
components, solved by a primal active-set method.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, lu_factor, lu_solve

from .errors import InfeasibleQP, RankDeficientConstraints


@dataclass
class QpResult:
    """``dw`` together with multipliers.

    ``lam`` are the equality multipliers and ``kappa`` the bound multipliers
    on the input components (positive at an active upper bound, negative at
    an active lower bound), both for the Lagrangian
    ``phi + lam' b + kappa' u``.
    """

    dw: np.ndarray
    lam: np.ndarray
    kappa: np.ndarray
    active: np.ndarray
    iterations: int


def box_qp(H, g, lb, ub, x0=None, active0=None, max_iterations: Optional[int] = None,
           tol: float = 1e-12):
    """Minimize ``1/2 x'Hx + g'x`` subject to ``lb <= x <= ub`` (``H`` positive definite).

    Primal active-set method.  ``active`` encodes -1 (at lower bound),
    +1 (at upper bound) or 0 (free).  Returns ``(x, active, iterations)``.
    """
    n = len(g)
    if np.any(lb > ub + tol):
        raise InfeasibleQP("lower bound exceeds upper bound")
    active = np.zeros(n, dtype=int) if active0 is None else np.asarray(active0, dtype=int).copy()
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    x = np.clip(x, lb, ub)
    active[(active == -1) & (x > lb)] = 0
    active[(active == 1) & (x < ub)] = 0
    x[active == -1] = lb[active == -1]
    x[active == 1] = ub[active == 1]
    max_iterations = max_iterations or 10 * n + 20
    scale = max(1.0, np.abs(H).max(), np.abs(g).max())
    for it in range(max_iterations):
        free = active == 0
        grad = H @ x + g
        p = np.zeros(n)
        if free.any():
            Hf = H[np.ix_(free, free)]
            try:
                p[free] = -np.linalg.solve(Hf, grad[free])
            except np.linalg.LinAlgError as exc:
                raise InfeasibleQP("reduced Hessian is singular") from exc
        if np.max(np.abs(p), initial=0.0) <= tol * max(1.0, np.abs(x).max()):
            # multipliers of the working set: grad + kappa = 0
            kappa = -grad
            wrong = np.where(active == -1, kappa > tol * scale,
                             np.where(active == 1, kappa < -tol * scale, False))
            if not wrong.any():
                return x, active, it
            viol = np.where(wrong, np.abs(kappa), 0.0)
            active[int(np.argmax(viol))] = 0
            continue
        alpha = 1.0
        block = -1
        for i in np.flatnonzero(free):
            if p[i] < 0:
                a = (lb[i] - x[i]) / p[i]
                if a < alpha:
                    alpha, block = a, i
            elif p[i] > 0:
                a = (ub[i] - x[i]) / p[i]
                if a < alpha:
                    alpha, block = a, i
        x = x + max(alpha, 0.0) * p
        if block >= 0:
            active[block] = -1 if p[block] < 0 else 1
            x[block] = lb[block] if p[block] < 0 else ub[block]
    raise InfeasibleQP(f"active-set method did not terminate in {max_iterations} iterations")


class CondensedQP:
    """Factorization of the state block of ``B`` reused for condensing and multipliers."""

    def __init__(self, B, state_index, u_index):
        self.B = np.asarray(B, dtype=float)
        self.si, self.ui = np.asarray(state_index), np.asarray(u_index)
        BS = self.B[:, self.si]
        if BS.shape[0] != BS.shape[1]:
            raise RankDeficientConstraints(
                f"state block of the constraint Jacobian is {BS.shape}, expected square")
        try:
            self.lu = lu_factor(BS, check_finite=True)
        except (LinAlgError, ValueError) as exc:
            raise RankDeficientConstraints("state block factorization failed") from exc
        piv = np.abs(np.diag(self.lu[0]))
        if piv.min() <= 1e-13 * max(1.0, piv.max()):
            raise RankDeficientConstraints("state block of the constraint Jacobian is singular")
        self.T = -lu_solve(self.lu, self.B[:, self.ui])

    def expand(self, du, r):
        n = len(self.si) + len(self.ui)
        dw = np.empty(n)
        dw[self.ui] = du
        dw[self.si] = self.T @ du - lu_solve(self.lu, r)
        return dw


def solve_qp(H, g, B, r, lower, upper, state_index, u_index,
             active0=None) -> QpResult:
    """Solve ``min 1/2 dw'H dw + g'dw`` s.t. ``B dw + r = 0``, ``lower <= dw[u_index] <= upper``.

    Raises
    ------
    RankDeficientConstraints
        If the state block of ``B`` is singular.
    InfeasibleQP
        If the bounds are inconsistent or the active-set loop fails.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    cq = CondensedQP(B, state_index, u_index)
    n = len(g)
    nU = len(cq.ui)
    Z = np.zeros((n, nU))
    Z[cq.si] = cq.T
    Z[cq.ui] = np.eye(nU)
    z0 = cq.expand(np.zeros(nU), np.asarray(r, dtype=float))
    Hr = Z.T @ H @ Z
    Hr = 0.5 * (Hr + Hr.T)
    gr = Z.T @ (g + H @ z0)
    du, active, its = box_qp(Hr, gr, np.asarray(lower, float), np.asarray(upper, float),
                             active0=active0)
    dw = Z @ du + z0
    kappa = -(Hr @ du + gr)
    kappa[active == 0] = 0.0
    resid = H @ dw + g
    lam = -lu_solve(cq.lu, resid[cq.si], trans=1)
    return QpResult(dw, lam, kappa, active, its)
