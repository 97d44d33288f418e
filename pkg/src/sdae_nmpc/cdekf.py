"""Continuous-discrete extended Kalman filter for semi-explicit index-1 SDAEs.

The measurement update linearizes ``m`` along the constraint manifold,
``C = m_x + m_y dy/dx`` with ``g_y dy/dx = -g_x``, and uses the Joseph form
for the covariance.  The prediction integrates the mean with an ESDIRK
method and propagates the covariance step by step as

    P <- A P A' + h/2 (A sigma sigma' A' + sigma sigma'),

where ``A`` is the differential-state transition matrix of the step,
obtained from the IND sensitivities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import (AlgebraicNoConvergence, IntegrationFailure, NoConvergence,
                     NonFiniteResidual, SingularInnovationCovariance, SingularJacobian)
from .esdirk import NewtonSettings, _batched, _Sens, _step
from .model import Model, algebraic_sensitivity, solve_consistent_algebraic
from .tableau import compute_predictor_coefficients, make_tableau

log = logging.getLogger(__name__)


@dataclass
class FilterState:
    """Filtered or predicted ``(x, y, P)``."""

    x: np.ndarray
    y: np.ndarray
    P: np.ndarray

    def copy(self) -> "FilterState":
        return FilterState(self.x.copy(), self.y.copy(), self.P.copy())


@dataclass
class UpdateReport:
    innovation: np.ndarray
    innovation_cov: np.ndarray
    gain: np.ndarray
    C: np.ndarray
    predicted_measurement: np.ndarray


def symmetrize(P):
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def _consistent(model, t, x, u, d, y_guess):
    try:
        return solve_consistent_algebraic(model, t, x, u, d, y_guess)
    except NoConvergence as exc:
        raise AlgebraicNoConvergence(str(exc), iterations=exc.iterations) from exc


def output_matrix(model: Model, t, x, y, u, d):
    """``C = m_x + m_y dy/dx`` evaluated at ``(x, y)``."""
    dydx = algebraic_sensitivity(model, t, x, y, u, d)
    return model.m_x(t, x, y, u, d) + model.m_y(t, x, y, u, d) @ dydx


def filter_update(model: Model, state: FilterState, y_meas, u_prev, d, R, t: float = 0.0):
    """Measurement update at time ``t`` using the previously applied input.

    Returns
    -------
    FilterState
        Filtered state with ``y`` re-solved for consistency.
    UpdateReport

    Raises
    ------
    SingularInnovationCovariance
        If ``C P C' + R`` is not positive definite.
    AlgebraicNoConvergence
        If the consistency solve for the filtered algebraic state fails.
    """
    x, y, P = state.x, state.y, state.P
    R = np.atleast_2d(np.asarray(R, dtype=float))
    y_hat = np.atleast_1d(model.m(t, x, y, u_prev, d))
    e = np.atleast_1d(np.asarray(y_meas, dtype=float)) - y_hat
    C = output_matrix(model, t, x, y, u_prev, d)
    Re = symmetrize(C @ P @ C.T + R)
    try:
        fac = cho_factor(Re)
    except LinAlgError as exc:
        raise SingularInnovationCovariance(
            "innovation covariance is not positive definite") from exc
    K = cho_solve(fac, C @ P).T
    x_new = x + K @ e
    IKC = np.eye(model.nx) - K @ C
    P_new = symmetrize(IKC @ P @ IKC.T + K @ R @ K.T)
    y_new = _consistent(model, t, x_new, u_prev, d, y)
    return FilterState(x_new, y_new, P_new), UpdateReport(e, Re, K, C, y_hat)


@dataclass
class PredictionConfig:
    """Integrator used for the filter prediction."""

    method: str = "ESDIRK34"
    steps: int = 5
    newton: NewtonSettings = None
    use_predictors: bool = True

    def __post_init__(self):
        if self.newton is None:
            self.newton = NewtonSettings()
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def predict(model: Model, state: FilterState, u, d, T_s: float,
            config: Optional[PredictionConfig] = None, t: float = 0.0,
            return_records: bool = False):
    """One-step prediction of mean and covariance over ``[t, t + T_s]``.

    The sensitivities are seeded once with ``[I; dy/dx]``, giving the
    transition matrix ``Phi_n`` of the differential states along the
    constraint manifold; the per-step factor is ``Phi_{n+1} Phi_n^-1``.
    The predicted algebraic state is polished to the consistency tolerance
    at the end.
    """
    config = config or PredictionConfig()
    tab = make_tableau(config.method)
    pred = compute_predictor_coefficients(tab)
    if not config.use_predictors:
        pred = replace(pred, trivial=True)
    h = T_s / config.steps
    _, tb, sb, ub, db = _batched(t, np.concatenate([state.x, state.y]), u, d)
    nx = model.nx
    SS = model.sigma @ model.sigma.T
    P = state.P.copy()
    E = np.concatenate([np.eye(nx)[None],
                        algebraic_sensitivity(model, tb, sb[:, :nx], sb[:, nx:], ub, db)],
                       axis=1)
    sens = _Sens(E, np.zeros((model.nu, nx)))
    Phi = np.eye(nx)
    prev = None
    records = []
    for k in range(config.steps):
        tk = tb + k * h
        try:
            sb, rec, sens, _ = _step(model, tab, pred, tk, sb, ub, db, h, prev,
                                     config.newton, sens=sens, check_consistency=k == 0)
        except (NoConvergence, NonFiniteResidual, SingularJacobian) as exc:
            raise IntegrationFailure(f"prediction step {k} failed: {exc}", step=k) from exc
        Phi_next = sens.D[0, :nx]
        # transition of this step alone
        A = np.linalg.solve(Phi.T, Phi_next.T).T
        P = symmetrize(A @ P @ A.T + 0.5 * h * (A @ SS @ A.T + SS))
        Phi = Phi_next
        prev = rec
        records.append(rec)
    x_new = sb[0, :nx].copy()
    y_new = _consistent(model, t + T_s, x_new, u, d, sb[0, nx:])
    out = FilterState(x_new, y_new, P)
    if return_records:
        return out, records
    return out


def is_psd(P, rtol: float = 1e-10) -> bool:
    """Smallest eigenvalue of the symmetric part >= ``-rtol * trace(P)``."""
    lam = np.linalg.eigvalsh(symmetrize(P))
    return bool(lam.min() >= -rtol * max(np.trace(P), 0.0))
