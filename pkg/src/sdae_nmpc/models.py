"""Small reference models with analytic partials, used for verification."""

from __future__ import annotations

import numpy as np

from .model import Model


def _bc(M, x, n_out):
    lead = np.shape(x)[:-1]
    return np.broadcast_to(M, lead + M.shape)


def linear_sdae(A, By, Gx, Gy, Bu=None, Gu=None, Cx=None, Cy=None,
                Hx=None, Hy=None, sigma=None, Bd=None, Gd=None, name="linear"):
    """Linear time-invariant SDAE.

    ``f = A x + By y + Bu u + Bd d``, ``g = Gx x + Gy y + Gu u + Gd d``,
    ``m = Cx x + Cy y``, ``h = Hx x + Hy y``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    nx = A.shape[0]
    Gy = np.atleast_2d(np.asarray(Gy, dtype=float))
    ny = Gy.shape[0]
    By = np.asarray(By, dtype=float).reshape(nx, ny)
    Gx = np.asarray(Gx, dtype=float).reshape(ny, nx)
    Bu = np.zeros((nx, 0)) if Bu is None else np.asarray(Bu, dtype=float).reshape(nx, -1)
    nu = Bu.shape[1]
    Gu = np.zeros((ny, nu)) if Gu is None else np.asarray(Gu, dtype=float).reshape(ny, nu)
    Bd = np.zeros((nx, 0)) if Bd is None else np.asarray(Bd, dtype=float).reshape(nx, -1)
    nd = Bd.shape[1]
    Gd = np.zeros((ny, nd)) if Gd is None else np.asarray(Gd, dtype=float).reshape(ny, nd)
    Cx = np.eye(nx) if Cx is None else np.atleast_2d(np.asarray(Cx, dtype=float))
    Cy = np.zeros((Cx.shape[0], ny)) if Cy is None else np.asarray(Cy, dtype=float).reshape(Cx.shape[0], ny)
    Hx = Cx if Hx is None else np.atleast_2d(np.asarray(Hx, dtype=float))
    Hy = np.zeros((Hx.shape[0], ny)) if Hy is None else np.asarray(Hy, dtype=float).reshape(Hx.shape[0], ny)

    def lin(Mx, My, Mu, Md):
        def fun(t, x, y, u, d):
            out = x @ Mx.T + y @ My.T
            if Mu.shape[1]:
                out = out + u @ Mu.T
            if Md.shape[1]:
                out = out + d @ Md.T
            return out
        return fun

    nm, nz = Cx.shape[0], Hx.shape[0]
    zu_m, zu_h = np.zeros((nm, nu)), np.zeros((nz, nu))
    zd_m, zd_h = np.zeros((nm, nd)), np.zeros((nz, nd))
    const = lambda M: (lambda t, x, y, u, d: _bc(M, x, 0))  # noqa: E731
    return Model(
        nx=nx, ny=ny, nu=nu, nd=nd,
        f=lin(A, By, Bu, Bd), g=lin(Gx, Gy, Gu, Gd),
        m=lin(Cx, Cy, zu_m, zd_m), h=lin(Hx, Hy, zu_h, zd_h),
        sigma=sigma,
        f_x=const(A), f_y=const(By), f_u=const(Bu),
        g_x=const(Gx), g_y=const(Gy), g_u=const(Gu),
        m_x=const(Cx), m_y=const(Cy), m_u=const(zu_m),
        h_x=const(Hx), h_y=const(Hy), h_u=const(zu_h),
        name=name)


def quadratic_decay(sigma=0.0) -> Model:
    """``x' = u - y``, ``0 = y - x^2``; with ``u = 0``, ``x(t) = x0 / (1 + x0 t)``."""

    def f(t, x, y, u, d):
        return u[..., :1] - y

    def g(t, x, y, u, d):
        return y - x**2

    def ident(t, x, y, u, d):
        return x

    one = np.ones((1, 1))
    return Model(
        nx=1, ny=1, nu=1, nd=0, f=f, g=g, m=ident, h=ident,
        sigma=np.array([[sigma]]),
        f_x=lambda t, x, y, u, d: _bc(0 * one, x, 1),
        f_y=lambda t, x, y, u, d: _bc(-one, x, 1),
        f_u=lambda t, x, y, u, d: _bc(one, x, 1),
        g_x=lambda t, x, y, u, d: -2.0 * x[..., None],
        g_y=lambda t, x, y, u, d: _bc(one, x, 1),
        g_u=lambda t, x, y, u, d: _bc(0 * one, x, 1),
        m_x=lambda t, x, y, u, d: _bc(one, x, 1),
        m_y=lambda t, x, y, u, d: _bc(0 * one, x, 1),
        h_x=lambda t, x, y, u, d: _bc(one, x, 1),
        h_y=lambda t, x, y, u, d: _bc(0 * one, x, 1),
        name="quadratic_decay")


def quadratic_decay_exact(t, x0):
    x = x0 / (1.0 + x0 * t)
    return x, x**2


def coupled_oscillator(sigma=0.0) -> Model:
    """Damped nonlinear oscillator with an implicit algebraic state.

    ``x1' = x2``, ``x2' = -y1 + u - 0.1 x2`` and
    ``0 = y1 + 0.5 tanh(y1) - sin(x1) - 0.2 x2 u``.
    """

    def f(t, x, y, u, d):
        return np.stack([x[..., 1], -y[..., 0] + u[..., 0] - 0.1 * x[..., 1]], axis=-1)

    def g(t, x, y, u, d):
        return (y[..., 0] + 0.5 * np.tanh(y[..., 0]) - np.sin(x[..., 0])
                - 0.2 * x[..., 1] * u[..., 0])[..., None]

    def m(t, x, y, u, d):
        return x[..., :1]

    lead = lambda x: np.shape(x)[:-1]  # noqa: E731

    def f_x(t, x, y, u, d):
        out = np.zeros(lead(x) + (2, 2))
        out[..., 0, 1] = 1.0
        out[..., 1, 1] = -0.1
        return out

    def f_y(t, x, y, u, d):
        out = np.zeros(lead(x) + (2, 1))
        out[..., 1, 0] = -1.0
        return out

    def f_u(t, x, y, u, d):
        out = np.zeros(lead(x) + (2, 1))
        out[..., 1, 0] = 1.0
        return out

    def g_x(t, x, y, u, d):
        return np.stack([-np.cos(x[..., 0]), -0.2 * u[..., 0] * np.ones_like(x[..., 0])],
                        axis=-1)[..., None, :]

    def g_y(t, x, y, u, d):
        return (1.0 + 0.5 / np.cosh(y[..., 0])**2)[..., None, None]

    def g_u(t, x, y, u, d):
        return (-0.2 * x[..., 1])[..., None, None]

    def m_x(t, x, y, u, d):
        out = np.zeros(lead(x) + (1, 2))
        out[..., 0, 0] = 1.0
        return out

    return Model(nx=2, ny=1, nu=1, nd=0, f=f, g=g, m=m, h=m,
                 sigma=sigma * np.eye(2), f_x=f_x, f_y=f_y, f_u=f_u,
                 g_x=g_x, g_y=g_y, g_u=g_u, m_x=m_x,
                 m_y=lambda t, x, y, u, d: np.zeros(lead(x) + (1, 1)),
                 h_x=m_x, h_y=lambda t, x, y, u, d: np.zeros(lead(x) + (1, 1)),
                 name="coupled_oscillator")
