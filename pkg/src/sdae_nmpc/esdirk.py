"""Fixed-step ESDIRK integration of semi-explicit index-1 DAEs.

Each step solves the implicit stages ``i = 2..n_s`` of

    X_i = x_k + h sum_j a_ij f(T_j, X_j, Y_j),    0 = g(T_i, X_i, Y_i)

with an inexact Newton scheme whose iteration matrix is built once per step
at ``(t_k, x_k, y_k)`` and reused for every stage.  Forward sensitivities are
obtained by differentiating exactly the iterations that were executed
(iterated internal numerical differentiation): the same frozen iteration
matrix, the same number of iterations per stage and the Jacobian of the
residual re-evaluated at every iterate.

All routines operate on a leading batch axis so that independent problems
sharing a step size (e.g. all shooting intervals of an OCP) advance together.
The public wrappers accept unbatched vectors as well.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import (InconsistentInput, IntegrationFailure, NoConvergence,
                     NonFiniteResidual, SingularJacobian)
from .model import Model
from .tableau import (ButcherTableau, PredictorCoefficients,
                      compute_predictor_coefficients, make_tableau)

_factorizations = itertools.count()
_last_count = [0]


def factorization_count() -> int:
    """Number of iteration-matrix factorizations performed so far."""
    return _last_count[0]


def _count_factorization():
    _last_count[0] = next(_factorizations) + 1


@dataclass
class NewtonSettings:
    """Stopping rule ``max_j |R_j| / max(abs_tol, rel_tol * |S_j|) < tau``.

    ``min_corrections`` is the number of corrections an integrator stage
    takes before the rule may stop it.  With zero, a stage whose guess
    already passes the test is never corrected and its sensitivity
    degenerates to that of the guess.
    """

    tau: float = 0.1
    abs_tol: float = 1e-6
    rel_tol: float = 1e-3
    max_iterations: int = 20
    min_corrections: int = 1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.min_corrections < 0 or self.max_iterations < self.min_corrections:
            raise ValueError("need 0 <= min_corrections <= max_iterations")

    def scaled_norm(self, R, S, mask=None):
        scale = np.maximum(self.abs_tol, self.rel_tol * np.abs(S))
        q = np.abs(R) / scale
        if mask is not None:
            q = q[..., mask]
        return np.max(q, axis=-1, initial=0.0)


@dataclass
class IterationMatrix:
    """Factorized ``M_k = [[I - h g f_x, -h g f_y], [-g_x, -g_y]]`` (stored as its inverse)."""

    inverse: np.ndarray
    h: float
    t: np.ndarray

    def solve(self, rhs):
        return np.matmul(self.inverse, rhs)


def build_iteration_matrix(fx, fy, gx, gy, h, gamma, t) -> IterationMatrix:
    nx = fx.shape[-1]
    top = np.concatenate([np.eye(nx) - h * gamma * fx, -h * gamma * fy], axis=-1)
    bottom = np.concatenate([-gx, -gy], axis=-1)
    M = np.concatenate([top, bottom], axis=-2)
    try:
        inv = np.linalg.inv(M)
    except np.linalg.LinAlgError as exc:
        raise SingularJacobian("iteration matrix is singular") from exc
    _count_factorization()
    return IterationMatrix(inv, h, np.asarray(t))


@dataclass
class SensitivityPair:
    """``ds/ds0`` with shape ``(ns, ns)`` and ``ds/du`` with shape ``(ns, nu)``.

    Either block may carry a leading batch axis.  ``ds_ds0`` may be ``None``
    when only input sensitivities are wanted.
    """

    ds_ds0: Optional[np.ndarray]
    ds_du: np.ndarray

    @classmethod
    def initial(cls, ns: int, nu: int, batch: Optional[int] = None) -> "SensitivityPair":
        lead = () if batch is None else (batch,)
        return cls(np.broadcast_to(np.eye(ns), lead + (ns, ns)).copy(),
                   np.zeros(lead + (ns, nu)))


@dataclass
class Quadrature:
    """Least-squares running cost ``l' = 1/2 |rho(t, x, y, u, d)|^2`` integrated with the states.

    ``rho_x``, ``rho_y``, ``rho_u`` return ``(..., nr, n)`` Jacobians.  Besides
    the cost and its gradient, the integrator accumulates the Gauss-Newton
    matrix ``int drho^T drho dt`` with respect to the sensitivity parameters.
    """

    rho: Callable
    rho_x: Callable
    rho_y: Callable
    rho_u: Callable


@dataclass
class StepRecord:
    t: np.ndarray
    h: float
    s_start: np.ndarray
    stages: np.ndarray
    corrections: np.ndarray
    matrix: IterationMatrix
    error: np.ndarray
    ds_start: Optional[np.ndarray] = None
    dstages: Optional[np.ndarray] = None

    @property
    def iterations(self) -> np.ndarray:
        """Newton-type corrections per implicit stage."""
        return self.corrections[..., 1:]


@dataclass
class _Sens:
    D: np.ndarray            # (B, ns, p) sensitivity of the state
    Eu: np.ndarray           # (nu, p) du/dparameter
    dl: Optional[np.ndarray] = None   # (B, p)
    gn: Optional[np.ndarray] = None   # (B, p, p)


@dataclass
class Trajectory:
    t: np.ndarray
    s: np.ndarray
    records: list = field(default_factory=list)
    sens: Optional[SensitivityPair] = None
    cost: Optional[np.ndarray] = None
    cost_grad: Optional[np.ndarray] = None
    cost_gn: Optional[np.ndarray] = None

    @property
    def final(self):
        return self.s[-1]


def _batched(t, s, u, d):
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    s = np.atleast_2d(s)
    B = s.shape[0]
    u = np.atleast_1d(np.asarray(u, dtype=float))
    d = np.atleast_1d(np.asarray(d, dtype=float))
    u = np.broadcast_to(u, (B, u.shape[-1])).copy()
    d = np.broadcast_to(d, (B, d.shape[-1])).copy()
    t = np.broadcast_to(np.asarray(t, dtype=float), (B,)).copy()
    return single, t, s, u, d


def _stage_guess(pred: PredictorCoefficients, prev: StepRecord, i: int):
    # prev.stages[:, 1:] are S_hat_2..S_hat_ns (the last equals s_k)
    guess = pred.alpha[i - 1] * prev.s_start + np.einsum(
        "j,bjn->bn", pred.beta[i - 1], prev.stages[:, 1:])
    return guess


def _stage_guess_sens(pred: PredictorCoefficients, prev: StepRecord, i: int):
    return pred.alpha[i - 1] * prev.ds_start + np.einsum(
        "j,bjnp->bnp", pred.beta[i - 1], prev.dstages[:, 1:])


def _step(model: Model, tab: ButcherTableau, pred: PredictorCoefficients,
          t, s, u, d, h: float, prev: Optional[StepRecord],
          settings: NewtonSettings, sens: Optional[_Sens] = None,
          quad: Optional[Quadrature] = None, cost=None,
          replay: Optional[StepRecord] = None, check_consistency: bool = True):
    """One batched ESDIRK step.  Returns ``(s_new, record, sens_new, cost_new)``."""
    B = s.shape[0]
    nx, ny = model.nx, model.ny
    n = nx + ny
    ns = tab.stages
    gamma = tab.gamma
    x, y = s[:, :nx], s[:, nx:]
    T = t[:, None] + tab.c[None, :] * h

    S = np.empty((B, ns, n))
    S[:, 0] = s
    F = np.empty((B, ns, nx))
    corrections = np.zeros((B, ns), dtype=int)

    F[:, 0] = model.f(T[:, 0], x, y, u, d)
    fx, fy, fu, gx, gy, gu = model.dae_jacobians(T[:, 0], x, y, u, d)
    if check_consistency:
        g0 = model.g(T[:, 0], x, y, u, d)
        if np.max(np.abs(g0), initial=0.0) > 1e-6:
            raise InconsistentInput(
                f"initial algebraic residual {np.max(np.abs(g0)):.3e} exceeds 1e-6")
    if replay is not None:
        M = replay.matrix
    else:
        M = build_iteration_matrix(fx, fy, gx, gy, h, gamma, t)

    with_sens = sens is not None
    if with_sens:
        p = sens.D.shape[-1]
        dS = np.empty((B, ns, n, p))
        dS[:, 0] = sens.D
        fS = np.empty((B, ns, nx, n))
        fU = np.empty((B, ns, nx, p))
        fS[:, 0] = np.concatenate([fx, fy], axis=-1)
        fU[:, 0] = fu @ sens.Eu
        eye_x = np.eye(nx)
    use_pred = prev is not None and not pred.trivial

    for i in range(1, ns):
        Ti = T[:, i]
        psi = x + h * np.einsum("j,bjn->bn", tab.A[i, :i], F[:, :i])
        if use_pred:
            Si = _stage_guess(pred, prev, i)
        else:
            Si = s.copy()
        if with_sens:
            dpsi = sens.D[:, :nx] + h * np.einsum(
                "j,bjnp->bnp", tab.A[i, :i],
                np.matmul(fS[:, :i], dS[:, :i]) + fU[:, :i])
            if use_pred and prev.dstages is not None:
                dSi = _stage_guess_sens(pred, prev, i)
            elif use_pred:
                dSi = np.zeros_like(sens.D)
            else:
                dSi = sens.D.copy()

        active = np.ones(B, dtype=bool)
        count = np.zeros(B, dtype=int)
        target = replay.corrections[:, i] if replay is not None else None
        while True:
            Xi, Yi = Si[:, :nx], Si[:, nx:]
            fi = model.f(Ti, Xi, Yi, u, d)
            gi = model.g(Ti, Xi, Yi, u, d)
            R = np.concatenate([Xi - h * gamma * fi - psi, -gi], axis=-1)
            if not np.all(np.isfinite(R)):
                raise NonFiniteResidual(f"non-finite stage residual at stage {i + 1}")
            if target is not None:
                active = count < target
            else:
                done = (settings.scaled_norm(R, Si) < settings.tau) & \
                    (count >= settings.min_corrections)
                active = active & ~done
            if not active.any():
                break
            if count[active].max() >= settings.max_iterations:
                bad = int(np.flatnonzero(active & (count >= settings.max_iterations))[0])
                raise NoConvergence(
                    f"stage {i + 1} Newton iteration did not converge in "
                    f"{settings.max_iterations} iterations", iterations=int(count.max()),
                    index=bad)
            delta = -M.solve(R[..., None])[..., 0]
            if with_sens:
                jfx, jfy, jfu, jgx, jgy, jgu = model.dae_jacobians(Ti, Xi, Yi, u, d)
                RS = np.concatenate([
                    np.concatenate([eye_x - h * gamma * jfx, -h * gamma * jfy], axis=-1),
                    np.concatenate([-jgx, -jgy], axis=-1)], axis=-2)
                Ru = np.concatenate([-h * gamma * jfu, -jgu], axis=-2) @ sens.Eu
                dR = RS @ dSi + Ru
                dR[:, :nx] -= dpsi
                dSi_next = dSi - M.solve(dR)
                dSi = np.where(active[:, None, None], dSi_next, dSi)
            Si = np.where(active[:, None], Si + delta, Si)
            count += active

        S[:, i] = Si
        F[:, i] = fi
        corrections[:, i] = count
        if with_sens:
            dS[:, i] = dSi
            jfx, jfy, jfu = (model.f_x(Ti, Xi, Yi, u, d), model.f_y(Ti, Xi, Yi, u, d),
                             model.f_u(Ti, Xi, Yi, u, d))
            fS[:, i] = np.concatenate([jfx, jfy], axis=-1)
            fU[:, i] = jfu @ sens.Eu

    s_new = S[:, -1].copy()
    x_hat = x + h * np.einsum("j,bjn->bn", tab.b_hat, F)
    err = s_new[:, :nx] - x_hat

    sens_new = None
    cost_new = cost
    if quad is not None:
        rho = np.stack([quad.rho(T[:, i], S[:, i, :nx], S[:, i, nx:], u, d)
                        for i in range(ns)], axis=1)
        cost_new = cost + 0.5 * h * np.einsum("j,bjr->b", tab.b, rho**2)
    if with_sens:
        sens_new = _Sens(dS[:, -1].copy(), sens.Eu)
        if quad is not None:
            dl = sens.dl.copy()
            gn = sens.gn.copy()
            for i in range(ns):
                if tab.b[i] == 0.0:
                    continue
                Xi, Yi = S[:, i, :nx], S[:, i, nx:]
                rS = np.concatenate([quad.rho_x(T[:, i], Xi, Yi, u, d),
                                     quad.rho_y(T[:, i], Xi, Yi, u, d)], axis=-1)
                drho = rS @ dS[:, i] + quad.rho_u(T[:, i], Xi, Yi, u, d) @ sens.Eu
                w = h * tab.b[i]
                dl += w * np.einsum("br,brp->bp", rho[:, i], drho)
                gn += w * np.einsum("brp,brq->bpq", drho, drho)
            sens_new.dl, sens_new.gn = dl, gn

    record = StepRecord(t=t.copy(), h=h, s_start=s.copy(), stages=S,
                        corrections=corrections, matrix=M, error=err,
                        ds_start=sens.D.copy() if with_sens else None,
                        dstages=dS if with_sens else None)
    return s_new, record, sens_new, cost_new


def _resolve(tableau, predictors):
    tab = make_tableau(tableau) if isinstance(tableau, str) else tableau
    if predictors is None:
        predictors = compute_predictor_coefficients(tab, 1.0)
    return tab, predictors


def newton_solve_stage(model: Model, tableau, M: IterationMatrix, psi, T_i, h, u, d,
                       S_guess, settings: Optional[NewtonSettings] = None):
    """Inexact Newton solve of one stage residual ``R_i(S) = [X - h g f - psi; -g]``.

    Returns ``(S, corrections, iterates)`` where ``iterates`` lists every
    ``S^[l]`` visited (the initial guess first).  The convergence test is
    done before each correction.
    """
    tab = make_tableau(tableau) if isinstance(tableau, str) else tableau
    settings = settings or NewtonSettings()
    nx = model.nx
    S = np.array(S_guess, dtype=float)
    iterates = [S.copy()]
    for l in range(settings.max_iterations + 1):
        X, Y = S[..., :nx], S[..., nx:]
        R = np.concatenate([X - h * tab.gamma * model.f(T_i, X, Y, u, d) - psi,
                            -model.g(T_i, X, Y, u, d)], axis=-1)
        if not np.all(np.isfinite(R)):
            raise NonFiniteResidual("non-finite stage residual")
        if np.all(settings.scaled_norm(R, S) < settings.tau):
            return S, l, iterates
        if l == settings.max_iterations:
            break
        S = S - M.solve(R[..., None])[..., 0]
        iterates.append(S.copy())
    raise NoConvergence("stage Newton iteration did not converge",
                        iterations=settings.max_iterations)


def esdirk_step(model: Model, tableau, t, s, u, d, h: float,
                prev: Optional[StepRecord] = None, predictors=None,
                settings: Optional[NewtonSettings] = None,
                replay: Optional[StepRecord] = None):
    """Advance ``s = [x; y]`` by one step of size ``h``.

    Returns ``(s_next, record)``.  ``prev`` (the previous step's record)
    enables the stage value predictors; without it the trivial predictor
    ``S_i^0 = s_k`` is used.
    """
    tab, pred = _resolve(tableau, predictors)
    settings = settings or NewtonSettings()
    single, tb, sb, ub, db = _batched(t, s, u, d)
    s_new, rec, _, _ = _step(model, tab, pred, tb, sb, ub, db, h, prev, settings,
                             replay=replay)
    return (s_new[0] if single else s_new), rec


def step_with_sensitivities(model: Model, tableau, t, s, u, d, h: float,
                            sens_in: SensitivityPair, prev: Optional[StepRecord] = None,
                            predictors=None, settings: Optional[NewtonSettings] = None,
                            replay: Optional[StepRecord] = None):
    """:func:`esdirk_step` that also propagates ``(ds/ds0, ds/du)``.

    Returns ``(s_next, record, sens_out)``.
    """
    tab, pred = _resolve(tableau, predictors)
    settings = settings or NewtonSettings()
    single, tb, sb, ub, db = _batched(t, s, u, d)
    sens, split = _pack(sens_in, model, sb.shape[0])
    s_new, rec, out, _ = _step(model, tab, pred, tb, sb, ub, db, h, prev, settings,
                               sens=sens, replay=replay)
    pair = _unpack(out, split, single)
    return (s_new[0] if single else s_new), rec, pair


def _pack(pair: SensitivityPair, model: Model, B: int):
    n, nu = model.ns, model.nu
    du = np.broadcast_to(pair.ds_du, (B, n, nu))
    if pair.ds_ds0 is None:
        D = du.copy()
        Eu = np.eye(nu)
        split = 0
    else:
        ds0 = np.broadcast_to(pair.ds_ds0, (B, n, pair.ds_ds0.shape[-1]))
        k = ds0.shape[-1]
        D = np.concatenate([ds0, du], axis=-1)
        Eu = np.concatenate([np.zeros((nu, k)), np.eye(nu)], axis=-1)
        split = k
    return _Sens(D, Eu), split


def _unpack(sens: _Sens, split: int, single: bool) -> SensitivityPair:
    D = sens.D[0] if single else sens.D
    if split == 0:
        return SensitivityPair(None, D.copy())
    return SensitivityPair(D[..., :split].copy(), D[..., split:].copy())


def integrate(model: Model, tableau, t0, tf, s0, u, d, steps: int,
              settings: Optional[NewtonSettings] = None, predictors=None,
              sensitivities: bool = False, sens_in: Optional[SensitivityPair] = None,
              replay: Optional[list] = None, use_predictors: bool = True,
              check_consistency: bool = True,
              quadrature: Optional[Quadrature] = None) -> Trajectory:
    """Integrate from ``t0`` to ``tf`` with ``steps`` equal ESDIRK steps.

    With ``sensitivities=True`` the returned trajectory carries the final
    :class:`SensitivityPair` (seeded with ``sens_in`` or identity/zero).
    ``replay`` is a list of records from an earlier run whose iteration
    matrices and iteration counts are reused verbatim (frozen scheme).
    A ``quadrature`` is integrated alongside; its value, gradient and
    Gauss-Newton matrix (the latter two with respect to the sensitivity
    parameters) are returned in ``cost``, ``cost_grad`` and ``cost_gn``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    tab, pred = _resolve(tableau, predictors)
    if not use_predictors:
        pred = replace(pred, trivial=True)
    settings = settings or NewtonSettings()
    single, tb, sb, ub, db = _batched(t0, s0, u, d)
    B = sb.shape[0]
    t0b = tb.copy()
    h = (float(tf) - float(np.asarray(t0).flat[0])) / steps
    sens = split = None
    if sensitivities or sens_in is not None:
        sens_in = sens_in or SensitivityPair.initial(model.ns, model.nu)
        sens, split = _pack(sens_in, model, B)
    cost = None
    if quadrature is not None:
        cost = np.zeros(B)
        if sens is not None:
            p = sens.D.shape[-1]
            sens.dl = np.zeros((B, p))
            sens.gn = np.zeros((B, p, p))
    ts = [t0b.copy()]
    ss = [sb.copy()]
    records = []
    prev = None
    for k in range(steps):
        tk = t0b + k * h
        try:
            sb, rec, sens, cost = _step(
                model, tab, pred, tk, sb, ub, db, h, prev, settings, sens=sens,
                quad=quadrature, cost=cost,
                replay=None if replay is None else replay[k],
                check_consistency=check_consistency and k == 0)
        except (NoConvergence, NonFiniteResidual, SingularJacobian) as exc:
            raise IntegrationFailure(f"step {k} failed: {exc}", step=k) from exc
        prev = rec
        records.append(rec)
        ts.append(t0b + (k + 1) * h)
        ss.append(sb.copy())
    t_arr = np.stack(ts, axis=-1)
    s_arr = np.stack(ss, axis=1)
    if single:
        t_arr, s_arr = t_arr[0], s_arr[0]
    pair = _unpack(sens, split, single) if sens is not None else None
    traj = Trajectory(t_arr, s_arr, records, pair)
    if quadrature is not None:
        traj.cost = cost[0] if single else cost
        if sens is not None:
            traj.cost_grad = sens.dl[0] if single else sens.dl
            traj.cost_gn = sens.gn[0] if single else sens.gn
    return traj
