"""Implicit-explicit simulation of semi-explicit index-1 SDAEs.

Each inner step solves

    x_{n+1} = x_n + f(t_{n+1}, x_{n+1}, y_{n+1}) dt + sigma dw_n,
    0       = g(t_{n+1}, x_{n+1}, y_{n+1}),

with exact Newton iterations.  Drift and constraint are implicit, the noise
enters explicitly.  All functions accept a leading batch axis so that many
Monte-Carlo paths advance together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoConvergence, NonFiniteResidual, SingularJacobian
from .esdirk import NewtonSettings, _batched
from .model import Model


def _plant_newton() -> NewtonSettings:
    return NewtonSettings(tau=1.0, abs_tol=1e-10, rel_tol=1e-10, max_iterations=50)


@dataclass
class SimConfig:
    """Inner step count per sampling interval and Newton settings."""

    steps: int = 20
    newton: NewtonSettings = field(default_factory=_plant_newton)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass(frozen=True)
class WienerPath:
    """Reproducible Brownian increments keyed by ``(seed, interval)``.

    The generator for interval ``k`` is seeded with ``SeedSequence(seed,
    spawn_key=(k,))`` so any interval can be regenerated independently of
    the others.
    """

    seed: int
    nw: int

    def increments(self, k: int, steps: int, dt: float) -> np.ndarray:
        """Array of shape ``(steps, nw)`` drawn from ``N(0, dt I)``."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(int(k),))
        rng = np.random.default_rng(ss)
        return rng.standard_normal((steps, self.nw)) * np.sqrt(dt)

    def generator(self, k: int, stream: int = 0) -> np.random.Generator:
        """Auxiliary generator (e.g. measurement noise) for interval ``k``."""
        return np.random.default_rng(
            np.random.SeedSequence(self.seed, spawn_key=(int(k), 1 + int(stream))))


def implicit_explicit_step(model: Model, t, s, u, d, dt: float, dw,
                           settings: NewtonSettings | None = None):
    """Advance ``s = [x; y]`` from ``t`` to ``t + dt`` with noise increment ``dw``.

    ``s`` may be ``(ns,)`` or ``(B, ns)``; ``dw`` broadcasts against the
    batch.  The Newton guess is the current state and the Jacobian is rebuilt
    at every iterate.

    Raises
    ------
    NoConvergence, SingularJacobian, NonFiniteResidual
    """
    settings = settings or _plant_newton()
    single, tb, sb, ub, db = _batched(t, s, u, d)
    B = sb.shape[0]
    nx = model.nx
    dw = np.broadcast_to(np.asarray(dw, dtype=float), (B, model.nw))
    t1 = tb + dt
    x0 = sb[:, :nx]
    base = x0 + dw @ model.sigma.T
    S = sb.copy()
    eye = np.eye(nx)
    active = np.ones(B, dtype=bool)
    for it in range(settings.max_iterations + 1):
        X, Y = S[:, :nx], S[:, nx:]
        R = np.concatenate([X - dt * model.f(t1, X, Y, ub, db) - base,
                            model.g(t1, X, Y, ub, db)], axis=-1)
        if not np.all(np.isfinite(R)):
            raise NonFiniteResidual("non-finite residual in implicit-explicit step")
        active &= ~(settings.scaled_norm(R, S) < settings.tau)
        if not active.any():
            break
        if it == settings.max_iterations:
            raise NoConvergence(
                f"implicit-explicit Newton did not converge in {settings.max_iterations}"
                " iterations", iterations=it, index=int(np.flatnonzero(active)[0]))
        fx, fy, _, gx, gy, _ = model.dae_jacobians(t1, X, Y, ub, db)
        J = np.concatenate([
            np.concatenate([eye - dt * fx, -dt * fy], axis=-1),
            np.concatenate([gx, gy], axis=-1)], axis=-2)
        try:
            step = np.linalg.solve(J, R[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian("implicit-explicit Jacobian is singular") from exc
        S = np.where(active[:, None], S - step, S)
    return S[0] if single else S


def simulate_interval(model: Model, t_k, s_k, u_k, d_k, T_s: float,
                      config: SimConfig | None = None, path=None, k: int = 0,
                      increments=None):
    """Simulate one sampling interval ``[t_k, t_k + T_s]``.

    Noise comes from ``increments`` (shape ``(steps, nw)`` or
    ``(B, steps, nw)``) if given, otherwise from ``path`` (a
    :class:`WienerPath` or a sequence of them, one per batch element).
    Without either the simulation is noise-free.

    Returns
    -------
    s_end : ndarray
        State at ``t_k + T_s``.
    trajectory : ndarray
        Inner states, shape ``(steps + 1, ns)`` or ``(B, steps + 1, ns)``.
    """
    config = config or SimConfig()
    M = config.steps
    dt = T_s / M
    s = np.asarray(s_k, dtype=float)
    single = s.ndim == 1
    sb = np.atleast_2d(s)
    B = sb.shape[0]
    if increments is None:
        if path is None:
            increments = np.zeros((B, M, model.nw))
        else:
            paths = path if isinstance(path, (list, tuple)) else [path] * B
            increments = np.stack([p.increments(k, M, dt) for p in paths])
    increments = np.broadcast_to(np.asarray(increments, dtype=float), (B, M, model.nw))
    traj = [sb.copy()]
    for n in range(M):
        sb = implicit_explicit_step(model, t_k + n * dt, sb, u_k, d_k, dt,
                                    increments[:, n], config.newton)
        traj.append(sb.copy())
    traj = np.stack(traj, axis=1)
    if single:
        return sb[0], traj[0]
    return sb, traj
