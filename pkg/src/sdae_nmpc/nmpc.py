"""Closed-loop NMPC: plant simulator, CD-EKF and OCP in the receding-horizon loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cdekf import FilterState, PredictionConfig, filter_update, predict
from .errors import LineSearchFailure, RunError, SdaeError
from .model import Model, solve_consistent_algebraic
from .ocp import OcpConfig, OcpProblem, warm_start_shift
from .sdae_sim import SimConfig, WienerPath, simulate_interval
from .sqp import SqpSettings, sqp_solve

log = logging.getLogger(__name__)


@dataclass
class Scenario:
    """Everything needed for one closed-loop run (times in seconds).

    ``disturbance`` has one row per sampling interval and ``setpoint`` one
    row per sampling instant; both must cover ``total_steps + N`` (+1 for
    the setpoint) so the last OCP can look ahead over its horizon.
    ``measurement_cov`` is the covariance of the noise actually added to
    the plant measurements; ``R`` is what the filter assumes.  When the
    SQP line search stalls, the best iterate is applied provided its
    constraint residual is below ``fallback_feasibility``.
    """

    model: Model
    x0: np.ndarray
    y0: np.ndarray
    u_prev: np.ndarray
    x_hat0: np.ndarray
    P0: np.ndarray
    R: np.ndarray
    ocp: OcpConfig
    total_steps: int
    disturbance: np.ndarray
    setpoint: np.ndarray
    plant_model: Optional[Model] = None
    plant: SimConfig = field(default_factory=SimConfig)
    seed: int = 0
    measurement_cov: Optional[np.ndarray] = None
    prediction: Optional[PredictionConfig] = None
    sqp: SqpSettings = field(default_factory=SqpSettings)
    fallback_feasibility: float = 1e-3

    def __post_init__(self):
        self.x0, self.y0, self.x_hat0 = (np.asarray(a, dtype=float)
                                         for a in (self.x0, self.y0, self.x_hat0))
        self.u_prev = np.atleast_1d(np.asarray(self.u_prev, dtype=float))
        self.P0 = np.atleast_2d(np.asarray(self.P0, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if self.measurement_cov is None:
            self.measurement_cov = self.R.copy()
        self.measurement_cov = np.atleast_2d(np.asarray(self.measurement_cov, dtype=float))
        self.disturbance = np.atleast_2d(np.asarray(self.disturbance, dtype=float))
        sp = np.asarray(self.setpoint, dtype=float)
        self.setpoint = sp[:, None] if sp.ndim == 1 else sp
        if self.plant_model is None:
            self.plant_model = self.model
        if self.prediction is None:
            self.prediction = PredictionConfig(self.ocp.method, self.ocp.steps)
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        need = self.total_steps + self.ocp.N
        if len(self.disturbance) < need:
            raise ValueError(f"disturbance must cover {need} intervals")
        if len(self.setpoint) < need + 1:
            raise ValueError(f"setpoint must cover {need + 1} instants")

    @property
    def T_s(self) -> float:
        return self.ocp.T_s


@dataclass
class StepLog:
    t: float
    x_true: np.ndarray
    y_true: np.ndarray
    y_meas: np.ndarray
    x_filt: np.ndarray
    y_filt: np.ndarray
    P_filt_diag: np.ndarray
    x_pred: np.ndarray
    P_pred_diag: np.ndarray
    u: np.ndarray
    setpoint: np.ndarray
    sqp_iterations: int
    sqp_converged: bool
    kkt: float
    newton_iterations: int

    @property
    def tracking_error(self) -> np.ndarray:
        return self.x_true[:len(self.setpoint)] - self.setpoint


@dataclass
class ClosedLoopLog:
    """Per-step records plus the plant state and filter prediction at the final instant."""

    steps: list = field(default_factory=list)
    x_final: Optional[np.ndarray] = None
    y_final: Optional[np.ndarray] = None
    final_estimate: Optional[FilterState] = None

    def __len__(self):
        return len(self.steps)

    def array(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.steps])

    @property
    def t(self) -> np.ndarray:
        return self.array("t")


def run_closed_loop(sc: Scenario) -> ClosedLoopLog:
    """Run the NMPC loop for ``sc.total_steps`` sampling intervals.

    Per step: measure, filter with the previous input, solve the OCP from
    the filtered state (warm started by shifting), apply the first input,
    advance the plant and predict the filter one interval ahead.

    Raises
    ------
    RunError
        Wrapping any solver failure, with the step index and the log so far.
    """
    model, T_s, N = sc.model, sc.T_s, sc.ocp.N
    path = WienerPath(sc.seed, sc.plant_model.nw)
    s_true = np.concatenate([sc.x0, sc.y0])
    nx = model.nx
    noise_chol = None
    if np.any(sc.measurement_cov != 0):
        noise_chol = np.linalg.cholesky(sc.measurement_cov)
    try:
        y_hat0 = solve_consistent_algebraic(model, 0.0, sc.x_hat0, sc.u_prev,
                                            sc.disturbance[0], sc.y0)
    except SdaeError as exc:
        raise RunError(f"inconsistent initial estimate: {exc}", step=0, log=ClosedLoopLog()) from exc
    state = FilterState(sc.x_hat0.copy(), y_hat0, sc.P0.copy())
    u_prev = sc.u_prev.copy()
    w_prev = None
    out = ClosedLoopLog()
    for k in range(sc.total_steps):
        t_k = k * T_s
        d_k = sc.disturbance[k]
        try:
            x_t, y_t = s_true[:nx], s_true[nx:]
            y_meas = np.atleast_1d(sc.plant_model.m(t_k, x_t, y_t, u_prev, d_k))
            if noise_chol is not None:
                y_meas = y_meas + noise_chol @ path.generator(k).standard_normal(len(y_meas))
            filt, _ = filter_update(model, state, y_meas, u_prev, d_k, sc.R, t_k)
            problem = OcpProblem(model, sc.ocp, filt.x, u_prev, sc.disturbance[k:k + N],
                                 sc.setpoint[k:k + N + 1], t0=t_k)
            if w_prev is None:
                w0 = problem.initial_guess(filt.y, u_prev)
            else:
                w0 = warm_start_shift(w_prev, problem.layout)
            w0[problem.layout.u_index] = np.clip(
                w0[problem.layout.u_index], np.tile(sc.ocp.u_min, N), np.tile(sc.ocp.u_max, N))
            try:
                res = sqp_solve(problem, w0, sc.sqp)
            except LineSearchFailure as exc:
                if exc.result is None or exc.result.feasibility > sc.fallback_feasibility:
                    raise
                log.warning("step %d: %s", k, exc)
                res = exc.result
            if not res.converged:
                log.warning("step %d: SQP not converged, applying best iterate", k)
            u_k = np.clip(res.u0(problem.layout), sc.ocp.u_min, sc.ocp.u_max)
            w_prev = res.w
            s_true, _ = simulate_interval(sc.plant_model, t_k, s_true, u_k, d_k, T_s,
                                          sc.plant, path, k)
            pred = predict(model, filt, u_k, d_k, T_s, sc.prediction, t=t_k)
        except SdaeError as exc:
            raise RunError(f"closed loop failed at step {k}: {exc}", step=k, log=out) from exc
        out.steps.append(StepLog(
            t=t_k, x_true=x_t.copy(), y_true=y_t.copy(), y_meas=y_meas, x_filt=filt.x,
            y_filt=filt.y, P_filt_diag=np.diag(filt.P).copy(), x_pred=pred.x,
            P_pred_diag=np.diag(pred.P).copy(), u=u_k, setpoint=sc.setpoint[k],
            sqp_iterations=res.iterations, sqp_converged=res.converged, kkt=res.kkt,
            newton_iterations=problem.newton_iterations))
        state = pred
        u_prev = u_k
    out.x_final, out.y_final = s_true[:nx].copy(), s_true[nx:].copy()
    out.final_estimate = state
    return out
