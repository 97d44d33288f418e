"""SQP with damped BFGS updates and an l1 merit line search."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import LineSearchFailure, MaxIterations, SdaeError
from .ocp import NlpEvaluation, OcpProblem
from .qp import solve_qp

log = logging.getLogger(__name__)


@dataclass
class SqpSettings:
    """Solver constants.

    ``kkt_tol`` applies to the constraint residual ``|b|_inf`` and to the
    Lagrangian gradient relative to ``max(1, |grad phi|_inf)``.
    ``hessian_init`` is ``"gauss-newton"`` (least-squares structure of the
    objective) or ``"identity"``.  A feasible iterate whose QP step is below
    ``step_tol * max(1, |w|_inf)`` also terminates (status ``"small-step"``);
    near such points the merit decrease drowns in integration noise.
    """

    kkt_tol: float = 1e-6
    max_iterations: int = 100
    damping: float = 0.2
    armijo: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-10
    penalty_factor: float = 1.1
    hessian_init: str = "gauss-newton"
    ridge: float = 1e-8
    step_tol: float = 1e-9
    raise_on_max_iterations: bool = False

    def __post_init__(self):
        for name in ("kkt_tol", "damping", "armijo", "backtrack", "min_step", "penalty_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.step_tol < 0:
            raise ValueError("step_tol must be non-negative")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")
        if self.hessian_init not in ("gauss-newton", "identity"):
            raise ValueError("hessian_init must be 'gauss-newton' or 'identity'")


@dataclass
class SqpResult:
    w: np.ndarray
    lam: np.ndarray
    kappa: np.ndarray
    iterations: int
    converged: bool
    kkt: float
    feasibility: float
    phi: float
    merit_history: list = field(default_factory=list)
    evaluations: int = 0
    hessian: Optional[np.ndarray] = None
    status: str = "kkt"

    def u0(self, layout) -> np.ndarray:
        """First input of the solution, the one applied to the plant."""
        return self.w[layout.u(0)].copy()


def damped_bfgs(H, s, y, damping: float = 0.2):
    """Powell-damped BFGS update; keeps ``H`` symmetric positive definite."""
    Hs = H @ s
    sHs = float(s @ Hs)
    if sHs <= 0:
        return H
    sy = float(s @ y)
    if sy < damping * sHs:
        theta = (1.0 - damping) * sHs / (sHs - sy)
        y = theta * y + (1.0 - theta) * Hs
        sy = float(s @ y)
    H = H + np.outer(y, y) / sy - np.outer(Hs, Hs) / sHs
    return 0.5 * (H + H.T)


def _initial_hessian(ev: NlpEvaluation, settings: SqpSettings, n: int):
    if settings.hessian_init == "identity" or ev.gn_hessian is None:
        return np.eye(n)
    H = ev.gn_hessian.copy()
    return 0.5 * (H + H.T) + settings.ridge * max(1.0, np.abs(np.diag(H)).max()) * np.eye(n)


def sqp_solve(problem: OcpProblem, w0, settings: Optional[SqpSettings] = None,
              hessian=None) -> SqpResult:
    """Solve the multiple-shooting NLP from ``w0``.

    Iterates QP step, Armijo backtracking on ``phi + mu |b|_1`` and a
    damped BFGS update of the Lagrangian Hessian.  Stops at iteration ``k``
    before taking a step when the QP multipliers certify a KKT point.

    Raises
    ------
    LineSearchFailure
        If no acceptable step length above ``min_step`` exists; the best
        iterate so far is attached as ``exc.result``.
    MaxIterations
        Only with ``settings.raise_on_max_iterations``; otherwise the best
        iterate (lowest merit) is returned with ``converged=False``.
    """
    settings = settings or SqpSettings()
    L = problem.layout
    cfg = problem.config
    ui, si = L.u_index, L.state_index
    u_lo = np.tile(cfg.u_min, cfg.N)
    u_hi = np.tile(cfg.u_max, cfg.N)
    w = np.asarray(w0, dtype=float).copy()
    if np.any(w[ui] < u_lo - 1e-12) or np.any(w[ui] > u_hi + 1e-12):
        raise ValueError("initial inputs violate the bounds")
    w[ui] = np.clip(w[ui], u_lo, u_hi)
    ev = problem.evaluate(w)
    n_eval = 1
    H = _initial_hessian(ev, settings, L.size) if hessian is None else hessian.copy()
    mu = 0.0
    active = None
    history = []
    best = None
    lam = np.zeros(len(ev.b))
    kappa = np.zeros(len(ui))
    kkt = np.inf
    for k in range(settings.max_iterations + 1):
        qp = solve_qp(H, ev.grad, ev.jac, ev.b, u_lo - w[ui], u_hi - w[ui], si, ui,
                      active0=active)
        active = qp.active
        lam, kappa = qp.lam, qp.kappa
        lag_grad = ev.grad + ev.jac.T @ lam
        lag_grad[ui] += kappa
        kkt = np.abs(lag_grad).max() / max(1.0, np.abs(ev.grad).max())
        feas = np.abs(ev.b).max()
        mu = max(mu, settings.penalty_factor * np.abs(lam).max(initial=0.0))
        merit = ev.phi + mu * np.abs(ev.b).sum()
        history.append(merit)
        if best is None or merit < best[0]:
            best = (merit, w.copy(), lam, kappa, ev.phi, feas, kkt)
        log.debug("sqp %d: phi=%.6e |b|=%.3e kkt=%.3e mu=%.3e", k, ev.phi, feas, kkt, mu)
        if kkt <= settings.kkt_tol and feas <= settings.kkt_tol:
            return SqpResult(w, lam, kappa, k, True, kkt, feas, ev.phi, history, n_eval, H)
        dw = qp.dw
        if feas <= settings.kkt_tol and \
                np.abs(dw).max() <= settings.step_tol * max(1.0, np.abs(w).max()):
            return SqpResult(w, lam, kappa, k, True, kkt, feas, ev.phi, history, n_eval, H,
                             status="small-step")
        if k == settings.max_iterations:
            break
        slope = ev.grad @ dw - mu * np.abs(ev.b).sum()
        if slope >= 0:
            # not a descent direction for the merit; fall back to steepest-descent metric
            H = _initial_hessian(ev, settings, L.size)
            continue
        alpha = 1.0
        while True:
            w_try = w + alpha * dw
            w_try[ui] = np.clip(w_try[ui], u_lo, u_hi)
            try:
                ev_try = problem.evaluate(w_try)
                n_eval += 1
                merit_try = ev_try.phi + mu * np.abs(ev_try.b).sum()
                ok = np.isfinite(merit_try) and \
                    merit_try <= merit + settings.armijo * alpha * slope
            except SdaeError as exc:
                log.debug("trial point failed (%s); backtracking", exc)
                ok = False
            if ok:
                break
            alpha *= settings.backtrack
            if alpha < settings.min_step:
                _, w_b, lam_b, kappa_b, phi_b, feas_b, kkt_b = best
                raise LineSearchFailure(
                    f"no acceptable step at SQP iteration {k} (merit {merit:.6e})",
                    result=SqpResult(w_b, lam_b, kappa_b, k, False, kkt_b, feas_b, phi_b,
                                     history, n_eval, H, status="line-search"))
        s = w_try - w
        grad_new = ev_try.grad + ev_try.jac.T @ lam
        grad_old = ev.grad + ev.jac.T @ lam
        H = damped_bfgs(H, s, grad_new - grad_old, settings.damping)
        w, ev = w_try, ev_try
    merit, w_best, lam, kappa, phi, feas, kkt = best
    result = SqpResult(w_best, lam, kappa, settings.max_iterations, False, kkt, feas, phi,
                       history, n_eval, H, status="max-iterations")
    msg = (f"SQP stopped after {settings.max_iterations} iterations "
           f"(kkt={kkt:.3e}, |b|={feas:.3e})")
    if settings.raise_on_max_iterations:
        raise MaxIterations(msg, result=result)
    log.warning(msg)
    return result
