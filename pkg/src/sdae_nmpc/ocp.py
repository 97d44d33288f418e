"""Multiple-shooting transcription of the setpoint-tracking OCP.

Decision vector layout::

    w = (wx_0, wy_0, u_0, wx_1, wy_1, u_1, ..., wx_{N-1}, wy_{N-1}, u_{N-1}, wx_N)

Each subinterval integrates the relaxed DAE

    x' = f(t, x, y, u_j, d_j),
    0  = g(t, x, y, u_j, d_j) - p_j(t) g(t_j, wx_j, wy_j, u_j, d_j),

with ``p_j(t) = exp(-eta (t - t_j) / (t_{j+1} - t_j))``, so the node may be
inconsistent.  The tracking integral is a least-squares quadrature carried
along by the integrator.  All subintervals are integrated as one batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import IntegrationFailure, NoConvergence, NonFiniteEvaluation, SingularJacobian
from .esdirk import NewtonSettings, Quadrature, _Sens, _step
from .model import Model, solve_consistent_algebraic
from .tableau import compute_predictor_coefficients, make_tableau


@dataclass
class OcpConfig:
    """Horizon, weights, bounds and integrator settings of the tracking OCP.

    Weights are given for the continuous objective; the move and terminal
    weights are scaled by ``1/T_s`` internally.
    """

    N: int = 25
    T_s: float = 240.0
    u_min: np.ndarray = field(default_factory=lambda: np.array([2.0]))
    u_max: np.ndarray = field(default_factory=lambda: np.array([10.0]))
    Q_z: np.ndarray = field(default_factory=lambda: np.array([[10.0]]))
    Q_du: np.ndarray = field(default_factory=lambda: np.array([[0.1]]))
    eta: float = 1.0
    method: str = "ESDIRK34"
    steps: int = 5
    newton: NewtonSettings = field(default_factory=NewtonSettings)

    def __post_init__(self):
        self.u_min = np.atleast_1d(np.asarray(self.u_min, dtype=float))
        self.u_max = np.atleast_1d(np.asarray(self.u_max, dtype=float))
        self.Q_z = np.atleast_2d(np.asarray(self.Q_z, dtype=float))
        self.Q_du = np.atleast_2d(np.asarray(self.Q_du, dtype=float))
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if np.any(self.u_min > self.u_max):
            raise ValueError("u_min must not exceed u_max")
        for name in ("Q_z", "Q_du"):
            Q = getattr(self, name)
            if np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")

    @property
    def T_N(self) -> float:
        return self.N * self.T_s

    @property
    def Q_du_bar(self):
        return self.Q_du / self.T_s

    @property
    def Q_z_bar(self):
        return self.Q_z / self.T_s


class Layout:
    """Index bookkeeping for the decision vector."""

    def __init__(self, nx: int, ny: int, nu: int, N: int):
        self.nx, self.ny, self.nu, self.N = nx, ny, nu, N
        self.block = nx + ny + nu
        self.size = N * self.block + nx

    def x(self, j: int) -> slice:
        o = j * self.block
        return slice(o, o + self.nx)

    def y(self, j: int) -> slice:
        o = j * self.block + self.nx
        return slice(o, o + self.ny)

    def u(self, j: int) -> slice:
        o = j * self.block + self.nx + self.ny
        return slice(o, o + self.nu)

    def node(self, j: int) -> slice:
        """``(wx_j, wy_j, u_j)``, the parameters of subinterval ``j``."""
        o = j * self.block
        return slice(o, o + self.block)

    @property
    def u_index(self) -> np.ndarray:
        return np.concatenate([np.arange(self.u(j).start, self.u(j).stop)
                               for j in range(self.N)])

    @property
    def state_index(self) -> np.ndarray:
        mask = np.ones(self.size, dtype=bool)
        mask[self.u_index] = False
        return np.flatnonzero(mask)

    def split(self, w):
        """Return ``(wx, wy, u)`` with shapes ``(N+1, nx)``, ``(N, ny)``, ``(N, nu)``."""
        w = np.asarray(w, dtype=float)
        blocks = w[:self.N * self.block].reshape(self.N, self.block)
        wx = np.vstack([blocks[:, :self.nx], w[None, self.N * self.block:]])
        return wx, blocks[:, self.nx:self.nx + self.ny], blocks[:, self.nx + self.ny:]

    def join(self, wx, wy, u) -> np.ndarray:
        wx, wy, u = (np.asarray(a, dtype=float) for a in (wx, wy, u))
        blocks = np.concatenate([wx[:self.N], wy, u], axis=1)
        return np.concatenate([blocks.ravel(), wx[self.N]])


def relaxation(t, t_j, dt, eta: float = 1.0):
    """``p_j(t) = exp(-eta (t - t_j) / dt)``."""
    return np.exp(-eta * (np.asarray(t) - t_j) / dt)


def relaxed_model(model: Model, eta: float = 1.0, Q_z=None) -> tuple[Model, Optional[Quadrature]]:
    """Wrap ``model`` as the relaxed DAE with parameters ``pi = (wx_j, wy_j, u_j)``.

    The wrapper's input is ``pi`` and its disturbance is
    ``(d_j, t_j, dt_j, zbar_j)``.  Also returns the tracking quadrature
    ``rho = L (h - zbar)`` with ``L' L = Q_z`` when ``Q_z`` is given.
    """
    nx, ny, nu, nd = model.nx, model.ny, model.nu, model.nd
    npi = nx + ny + nu

    def parts(pi, dd):
        wx, wy, u = pi[..., :nx], pi[..., nx:nx + ny], pi[..., nx + ny:]
        d = dd[..., :nd]
        tj, dt = dd[..., nd], dd[..., nd + 1]
        return wx, wy, u, d, tj, dt, dd[..., nd + 2:]

    def f(t, x, y, pi, dd):
        _, _, u, d, *_ = parts(pi, dd)
        return model.f(t, x, y, u, d)

    def g(t, x, y, pi, dd):
        wx, wy, u, d, tj, dt, _ = parts(pi, dd)
        p = relaxation(t, tj, dt, eta)
        return model.g(t, x, y, u, d) - p[..., None] * model.g(tj, wx, wy, u, d)

    def f_x(t, x, y, pi, dd):
        _, _, u, d, *_ = parts(pi, dd)
        return model.f_x(t, x, y, u, d)

    def f_y(t, x, y, pi, dd):
        _, _, u, d, *_ = parts(pi, dd)
        return model.f_y(t, x, y, u, d)

    def f_pi(t, x, y, pi, dd):
        _, _, u, d, *_ = parts(pi, dd)
        fu = model.f_u(t, x, y, u, d)
        out = np.zeros(fu.shape[:-1] + (npi,))
        out[..., nx + ny:] = fu
        return out

    def g_x(t, x, y, pi, dd):
        _, _, u, d, *_ = parts(pi, dd)
        return model.g_x(t, x, y, u, d)

    def g_y(t, x, y, pi, dd):
        _, _, u, d, *_ = parts(pi, dd)
        return model.g_y(t, x, y, u, d)

    def g_pi(t, x, y, pi, dd):
        wx, wy, u, d, tj, dt, _ = parts(pi, dd)
        p = relaxation(t, tj, dt, eta)[..., None, None]
        out = np.concatenate([-p * model.g_x(tj, wx, wy, u, d),
                              -p * model.g_y(tj, wx, wy, u, d),
                              model.g_u(t, x, y, u, d) - p * model.g_u(tj, wx, wy, u, d)],
                             axis=-1)
        return out

    nz = 0 if Q_z is None else np.atleast_2d(Q_z).shape[0]
    relaxed = Model(nx=nx, ny=ny, nu=npi, nd=nd + 2 + nz,
                    f=f, g=g, sigma=model.sigma, f_x=f_x, f_y=f_y, f_u=f_pi,
                    g_x=g_x, g_y=g_y, g_u=g_pi, m=None, h=None,
                    name=f"relaxed[{model.name}]")
    if Q_z is None:
        return relaxed, None
    L = _psd_root(np.atleast_2d(Q_z))

    def rho(t, x, y, pi, dd):
        _, _, u, d, _, _, zbar = parts(pi, dd)
        return (model.h(t, x, y, u, d) - zbar) @ L.T

    def rho_x(t, x, y, pi, dd):
        _, _, u, d, *_ = parts(pi, dd)
        return L @ model.h_x(t, x, y, u, d)

    def rho_y(t, x, y, pi, dd):
        _, _, u, d, *_ = parts(pi, dd)
        return L @ model.h_y(t, x, y, u, d)

    def rho_pi(t, x, y, pi, dd):
        _, _, u, d, *_ = parts(pi, dd)
        hu = L @ model.h_u(t, x, y, u, d)
        out = np.zeros(hu.shape[:-1] + (npi,))
        out[..., nx + ny:] = hu
        return out

    return relaxed, Quadrature(rho, rho_x, rho_y, rho_pi)


def _psd_root(Q):
    lam, V = np.linalg.eigh(0.5 * (Q + Q.T))
    return (V * np.sqrt(np.clip(lam, 0.0, None))).T


@dataclass
class ShootingResult:
    """Batched results of integrating every subinterval.

    ``endpoint`` is ``(N, ns)``, ``cost`` ``(N,)``; sensitivities are with
    respect to ``pi_j = (wx_j, wy_j, u_j)``: ``d_endpoint`` ``(N, ns, npi)``,
    ``d_cost`` ``(N, npi)`` and the Gauss-Newton matrix ``gn_cost``
    ``(N, npi, npi)``.
    """

    endpoint: np.ndarray
    cost: np.ndarray
    d_endpoint: Optional[np.ndarray] = None
    d_cost: Optional[np.ndarray] = None
    gn_cost: Optional[np.ndarray] = None
    newton_iterations: int = 0


def shoot_intervals(model: Model, wx, wy, u, d, t_nodes, dt: float, zbar, config: OcpConfig,
                    sensitivities: bool = True, relaxed=None) -> ShootingResult:
    """Integrate all subintervals from their nodes in one batch.

    ``wx``, ``wy``, ``u``, ``d``, ``zbar`` carry one row per subinterval and
    ``t_nodes`` holds the start times.
    """
    if relaxed is None:
        relaxed = relaxed_model(model, config.eta, config.Q_z)
    rmodel, quad = relaxed
    tab = make_tableau(config.method)
    pred = compute_predictor_coefficients(tab)
    wx, wy, u, d, zbar = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (wx, wy, u, d, zbar))
    B = wx.shape[0]
    d = np.broadcast_to(d, (B, model.nd))
    t_nodes = np.broadcast_to(np.asarray(t_nodes, dtype=float), (B,)).copy()
    pi = np.concatenate([wx, wy, u], axis=1)
    dd = np.concatenate([d, t_nodes[:, None], np.full((B, 1), dt), zbar], axis=1)
    s = np.concatenate([wx, wy], axis=1)
    ns, npi = model.ns, pi.shape[1]
    sens = None
    if sensitivities:
        D = np.zeros((B, ns, npi))
        D[:, :, :ns] = np.eye(ns)
        sens = _Sens(D, np.eye(npi), np.zeros((B, npi)), np.zeros((B, npi, npi)))
    cost = np.zeros(B)
    h = dt / config.steps
    prev = None
    iters = 0
    for k in range(config.steps):
        try:
            s, rec, sens, cost = _step(rmodel, tab, pred, t_nodes + k * h, s, pi, dd, h, prev,
                                       config.newton, sens=sens, quad=quad, cost=cost,
                                       check_consistency=False)
        except NoConvergence as exc:
            raise IntegrationFailure(f"subinterval {exc.index} step {k}: {exc}", step=k,
                                     interval=exc.index) from exc
        except (SingularJacobian, NonFiniteEvaluation) as exc:
            raise IntegrationFailure(f"step {k}: {exc}", step=k) from exc
        iters += int(rec.corrections.sum())
        prev = rec
    if sens is None:
        return ShootingResult(s, cost, newton_iterations=iters)
    return ShootingResult(s, cost, sens.D, sens.dl, sens.gn, newton_iterations=iters)


def shoot_interval(model: Model, wx_j, wy_j, u_j, d_j, t_j, t_next, zbar_j,
                   config: OcpConfig, sensitivities: bool = True) -> ShootingResult:
    """Single-subinterval version of :func:`shoot_intervals` (unbatched outputs)."""
    res = shoot_intervals(model, wx_j, wy_j, u_j, d_j, t_j, float(t_next - t_j),
                          np.atleast_1d(zbar_j), config, sensitivities)
    out = ShootingResult(res.endpoint[0], res.cost[0], newton_iterations=res.newton_iterations)
    if sensitivities:
        out.d_endpoint, out.d_cost, out.gn_cost = res.d_endpoint[0], res.d_cost[0], res.gn_cost[0]
    return out


@dataclass
class NlpEvaluation:
    phi: float
    grad: np.ndarray
    b: np.ndarray
    jac: Optional[np.ndarray]
    gn_hessian: Optional[np.ndarray] = None
    terminal_y: Optional[np.ndarray] = None
    shooting: Optional[ShootingResult] = None


class OcpProblem:
    """One instance of the tracking OCP at sampling time ``t0``.

    Parameters
    ----------
    model : Model
    config : OcpConfig
    x_hat : array_like
        Filtered differential state (initial-value constraint).
    u_prev : array_like
        Previously applied input, anchoring the first move penalty.
    d : array_like, shape (N, nd)
        Disturbance per subinterval.
    zbar : array_like, shape (N + 1, nz)
        Setpoint per subinterval plus the terminal setpoint.
    t0 : float
    """

    def __init__(self, model: Model, config: OcpConfig, x_hat, u_prev, d, zbar,
                 t0: float = 0.0, y_guess=None):
        self.model = model
        self.config = config
        self.layout = Layout(model.nx, model.ny, model.nu, config.N)
        self.x_hat = np.asarray(x_hat, dtype=float)
        self.u_prev = np.atleast_1d(np.asarray(u_prev, dtype=float))
        N = config.N
        self.d = np.broadcast_to(np.atleast_2d(np.asarray(d, dtype=float)),
                                 (N, model.nd)).copy() if model.nd else np.zeros((N, 0))
        zbar = np.atleast_1d(np.asarray(zbar, dtype=float))
        if zbar.ndim == 1:
            zbar = zbar[:, None] if zbar.size == N + 1 else np.broadcast_to(zbar, (N + 1, zbar.size))
        self.zbar = np.asarray(zbar, dtype=float)
        self.t0 = float(t0)
        self.t_nodes = self.t0 + config.T_s * np.arange(N)
        self.relaxed = relaxed_model(model, config.eta, config.Q_z)
        self._y_term = None if y_guess is None else np.asarray(y_guess, dtype=float)
        self.newton_iterations = 0

    # objective pieces -------------------------------------------------
    def _terminal(self, wx_N, u_last, y_guess):
        m, cfg = self.model, self.config
        tN = self.t0 + cfg.T_N
        dN = self.d[-1]
        y = solve_consistent_algebraic(m, tN, wx_N, u_last, dN, y_guess)
        dydx = -np.linalg.solve(m.g_y(tN, wx_N, y, u_last, dN), m.g_x(tN, wx_N, y, u_last, dN))
        dydu = -np.linalg.solve(m.g_y(tN, wx_N, y, u_last, dN), m.g_u(tN, wx_N, y, u_last, dN))
        hy = m.h_y(tN, wx_N, y, u_last, dN)
        r = np.atleast_1d(m.h(tN, wx_N, y, u_last, dN)) - self.zbar[-1]
        Jx = m.h_x(tN, wx_N, y, u_last, dN) + hy @ dydx
        Ju = m.h_u(tN, wx_N, y, u_last, dN) + hy @ dydu
        return y, r, Jx, Ju

    def evaluate(self, w, derivatives: bool = True) -> NlpEvaluation:
        """Objective, constraints and (optionally) their derivatives at ``w``."""
        L, cfg, m = self.layout, self.config, self.model
        nx, ny, nu, N = m.nx, m.ny, m.nu, cfg.N
        w = np.asarray(w, dtype=float)
        wx, wy, u = L.split(w)
        res = shoot_intervals(m, wx[:N], wy, u, self.d, self.t_nodes, cfg.T_s,
                              self.zbar[:N], cfg, derivatives, self.relaxed)
        self.newton_iterations += res.newton_iterations
        # constraints
        gnode = m.g(self.t_nodes, wx[:N], wy, u, self.d)
        b_parts = [wx[0] - self.x_hat]
        match = res.endpoint[:, :nx] - wx[1:]
        b = np.concatenate([b_parts[0], np.concatenate([match, gnode], axis=1).ravel()])
        # objective
        du = np.diff(np.vstack([self.u_prev, u]), axis=0)
        Qd = cfg.Q_du_bar
        y_guess = self._y_term if self._y_term is not None else res.endpoint[-1, nx:]
        yN, rN, Jx, Ju = self._terminal(wx[N], u[-1], y_guess)
        self._y_term = yN
        Qz = cfg.Q_z_bar
        phi = float(res.cost.sum() + 0.5 * np.einsum("ji,ik,jk->", du, Qd, du)
                    + 0.5 * rN @ Qz @ rN)
        if not derivatives:
            return NlpEvaluation(phi, None, b, None, terminal_y=yN, shooting=res)

        n = L.size
        grad = np.zeros(n)
        H = np.zeros((n, n))
        for j in range(N):
            sl = L.node(j)
            grad[sl] += res.d_cost[j]
            H[sl, sl] += res.gn_cost[j]
        # move penalty, exact second derivative
        for j in range(N):
            gj = Qd @ du[j]
            grad[L.u(j)] += gj
            H[L.u(j), L.u(j)] += Qd
            if j + 1 < N:
                grad[L.u(j)] -= Qd @ du[j + 1]
                H[L.u(j), L.u(j)] += Qd
                H[L.u(j), L.u(j + 1)] -= Qd
                H[L.u(j + 1), L.u(j)] -= Qd
        # terminal term
        Jt = np.zeros((len(rN), n))
        Jt[:, L.x(N)] = Jx
        Jt[:, L.u(N - 1)] = Ju
        grad += Jt.T @ Qz @ rN
        H += Jt.T @ Qz @ Jt
        # constraint Jacobian
        jac = np.zeros((len(b), n))
        jac[:nx, L.x(0)] = np.eye(nx)
        gx, gy, gu = (m.g_x(self.t_nodes, wx[:N], wy, u, self.d),
                      m.g_y(self.t_nodes, wx[:N], wy, u, self.d),
                      m.g_u(self.t_nodes, wx[:N], wy, u, self.d))
        row = nx
        for j in range(N):
            jac[row:row + nx, L.node(j)] = res.d_endpoint[j, :nx]
            jac[row:row + nx, L.x(j + 1)] -= np.eye(nx)
            row += nx
            jac[row:row + ny, L.node(j)] = np.concatenate([gx[j], gy[j], gu[j]], axis=1)
            row += ny
        return NlpEvaluation(phi, grad, b, jac, gn_hessian=H, terminal_y=yN, shooting=res)

    def initial_guess(self, y0, u0) -> np.ndarray:
        """Replicated point ``(x0, y0, u0, ..., x0)`` with ``x0 = x_hat``."""
        N = self.config.N
        return self.layout.join(np.tile(self.x_hat, (N + 1, 1)),
                                np.tile(np.asarray(y0, dtype=float), (N, 1)),
                                np.tile(np.atleast_1d(np.asarray(u0, dtype=float)), (N, 1)))


def eval_nlp(model: Model, w, x_hat, u_prev, d, zbar, config: OcpConfig,
             t0: float = 0.0) -> NlpEvaluation:
    """Functional form of :meth:`OcpProblem.evaluate`."""
    return OcpProblem(model, config, x_hat, u_prev, d, zbar, t0).evaluate(w)


def warm_start_shift(w_prev, layout: Layout) -> np.ndarray:
    """Shift a solution one subinterval forward.

    Returns ``(wx_1, wy_1, u_1, ..., wx_{N-1}, wy_{N-1}, u_{N-1},
    wx_N, wy_{N-1}, u_{N-1}, wx_N)``.
    """
    wx, wy, u = layout.split(w_prev)
    wx_new = np.vstack([wx[1:], wx[-1:]])
    wy_new = np.vstack([wy[1:], wy[-1:]])
    u_new = np.vstack([u[1:], u[-1:]])
    return layout.join(wx_new, wy_new, u_new)
