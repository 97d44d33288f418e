"""Alkaline electrolyzer stack model.

States ``x = [T, T_in]`` (degC), algebraic states ``y = [U_cell, I]``
(V, A), input ``u = [f_in]`` (kg/s) and disturbances ``d = [T_amb, P_in]``
(degC, W).  Time is in seconds.

The power balance residual is divided by ``n_c U_tn`` so that it is
expressed in amperes, the unit of the algebraic state it pins down.  This
keeps the scaled Newton stopping test meaningful for that row.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DomainError, ParseError
from .model import Model

DEFAULT_CONFIG = "electrolyzer_default.conf"


@dataclass(frozen=True)
class ElectrolyzerParams:
    C_p_el: float
    c_P_lye: float
    n_c: float
    U_tn: float
    A_s: float
    h_c: float
    U_rev: float
    A: float
    r1: float
    r2: float
    s: float
    t1: float
    t2: float
    t3: float
    sigma: float = 0.03

    def __post_init__(self):
        for name in ("C_p_el", "c_P_lye", "n_c", "U_tn", "A_s", "h_c", "U_rev", "A", "s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"parameter {name} must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    def replace(self, **changes) -> "ElectrolyzerParams":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(changes)
        return ElectrolyzerParams(**vals)


def parse_params(text: str, source: str = "<string>") -> ElectrolyzerParams:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    names = {f.name for f in fields(ElectrolyzerParams)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in names:
            raise ParseError(f"{source}:{lineno}: unknown parameter {key!r}")
        if key in values:
            raise ParseError(f"{source}:{lineno}: duplicate parameter {key!r}")
        try:
            values[key] = float(val)
        except ValueError:
            raise ParseError(f"{source}:{lineno}: {val!r} is not a number") from None
    missing = sorted(names - set(values))
    if missing:
        raise ParseError(f"{source}: missing parameters {missing}")
    try:
        return ElectrolyzerParams(**values)
    except ValueError as exc:
        raise ParseError(f"{source}: {exc}") from None


def load_params(path=None) -> ElectrolyzerParams:
    """Load a parameter file; ``None`` loads the bundled default set."""
    if path is None:
        res = resources.files("sdae_nmpc").joinpath("data").joinpath(DEFAULT_CONFIG)
        text = res.read_text()
        return parse_params(text, DEFAULT_CONFIG)
    path = Path(path)
    return parse_params(path.read_text(), str(path))


def power_scale(p: ElectrolyzerParams) -> float:
    """Divisor of the power residual, ``n_c U_tn`` (W/A)."""
    return p.n_c * p.U_tn


def _unpack(x, y, u, d):
    x, y, u, d = (np.asarray(a, dtype=float) for a in (x, y, u, d))
    return x[..., 0], x[..., 1], y[..., 0], y[..., 1], u[..., 0], d[..., 0], d[..., 1]


def _activation(p: ElectrolyzerParams, T, I):
    q = p.t1 + p.t2 / T + p.t3 / T**2
    arg = q * I / p.A + 1.0
    if np.any(arg <= 0):
        raise DomainError("activation overvoltage log argument is not positive")
    return q, arg


def cell_voltage(p: ElectrolyzerParams, T, I):
    """``U_rev + U_ohm(T, I) + U_act(T, I)``."""
    _, arg = _activation(p, T, I)
    return p.U_rev + (p.r1 + p.r2 * T) * I / p.A + p.s * np.log(arg)


def heat_terms(p: ElectrolyzerParams, x, y, u, d):
    """The three power addends of the stack energy balance (W): lye, electric, ambient."""
    T, T_in, U, I, f_in, T_amb, _ = _unpack(x, y, u, d)
    return (f_in * p.c_P_lye * (T_in - T), p.n_c * (U - p.U_tn) * I,
            -p.A_s * p.h_c * (T - T_amb))


def electrolyzer_f(t, x, y, u, d, params: ElectrolyzerParams):
    lye, elec, amb = heat_terms(params, x, y, u, d)
    dT = (lye + elec + amb) / params.C_p_el
    return np.stack([dT, np.zeros_like(dT)], axis=-1)


def electrolyzer_g(t, x, y, u, d, params: ElectrolyzerParams):
    T, _, U, I, _, _, P_in = _unpack(x, y, u, d)
    r1 = U - cell_voltage(params, T, I)
    r2 = (P_in - params.n_c * U * I) / power_scale(params)
    return np.stack([r1, r2], axis=-1)


def electrolyzer_outputs():
    """Measurement ``m = T`` and controlled output ``h = T``."""

    def m(t, x, y, u, d):
        return np.asarray(x, dtype=float)[..., :1]

    return m, m


def _partials(p: ElectrolyzerParams):
    def lead(x):
        return np.shape(x)[:-1]

    def f_x(t, x, y, u, d):
        T, T_in, U, I, f_in, T_amb, _ = _unpack(x, y, u, d)
        out = np.zeros(lead(x) + (2, 2))
        out[..., 0, 0] = -(f_in * p.c_P_lye + p.A_s * p.h_c) / p.C_p_el
        out[..., 0, 1] = f_in * p.c_P_lye / p.C_p_el
        return out

    def f_y(t, x, y, u, d):
        T, T_in, U, I, f_in, T_amb, _ = _unpack(x, y, u, d)
        out = np.zeros(lead(x) + (2, 2))
        out[..., 0, 0] = p.n_c * I / p.C_p_el
        out[..., 0, 1] = p.n_c * (U - p.U_tn) / p.C_p_el
        return out

    def f_u(t, x, y, u, d):
        T, T_in, *_ = _unpack(x, y, u, d)
        out = np.zeros(lead(x) + (2, 1))
        out[..., 0, 0] = p.c_P_lye * (T_in - T) / p.C_p_el
        return out

    def g_x(t, x, y, u, d):
        T, _, U, I, *_ = _unpack(x, y, u, d)
        _, arg = _activation(p, T, I)
        dq = -p.t2 / T**2 - 2.0 * p.t3 / T**3
        out = np.zeros(lead(x) + (2, 2))
        out[..., 0, 0] = -(p.r2 * I / p.A + p.s * dq * I / (p.A * arg))
        return out

    def g_y(t, x, y, u, d):
        T, _, U, I, *_ = _unpack(x, y, u, d)
        q, arg = _activation(p, T, I)
        out = np.empty(lead(x) + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 0, 1] = -((p.r1 + p.r2 * T) / p.A + p.s * q / (p.A * arg))
        out[..., 1, 0] = -p.n_c * I / power_scale(p)
        out[..., 1, 1] = -p.n_c * U / power_scale(p)
        return out

    def zeros(rows, cols):
        return lambda t, x, y, u, d: np.zeros(lead(x) + (rows, cols))

    def sel_x(t, x, y, u, d):
        out = np.zeros(lead(x) + (1, 2))
        out[..., 0, 0] = 1.0
        return out

    return dict(f_x=f_x, f_y=f_y, f_u=f_u, g_x=g_x, g_y=g_y, g_u=zeros(2, 1),
                m_x=sel_x, m_y=zeros(1, 2), m_u=zeros(1, 1),
                h_x=sel_x, h_y=zeros(1, 2), h_u=zeros(1, 1))


def electrolyzer_model(params: ElectrolyzerParams | None = None,
                       sigma: float | None = None) -> Model:
    """Build the stack model as a :class:`Model` with analytic partials.

    ``sigma`` overrides ``params.sigma``; the diffusion acts on ``T_in`` only.
    """
    p = params or load_params()
    sig = p.sigma if sigma is None else float(sigma)
    m, h = electrolyzer_outputs()
    return Model(
        nx=2, ny=2, nu=1, nd=2,
        f=lambda t, x, y, u, d: electrolyzer_f(t, x, y, u, d, p),
        g=lambda t, x, y, u, d: electrolyzer_g(t, x, y, u, d, p),
        m=m, h=h, sigma=np.array([[0.0], [sig]]), name="electrolyzer",
        **_partials(p))


def consistent_current(params: ElectrolyzerParams, T: float, P_in: float,
                       tol: float = 1e-13) -> tuple[float, float]:
    """Bisection on ``P_in = n_c U_cell(T, I) I`` over ``I``; returns ``(U_cell, I)``.

    Independent of the Newton machinery, used as a reference solution.
    """
    def power(I):
        return params.n_c * cell_voltage(params, T, I) * I - P_in

    lo, hi = 0.0, P_in / (params.n_c * params.U_rev)
    while power(hi) < 0:
        hi *= 2.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if power(mid) > 0:
            hi = mid
        else:
            lo = mid
    I = 0.5 * (lo + hi)
    return float(cell_voltage(params, T, I)), float(I)


def steady_state(params: ElectrolyzerParams, T: float, T_in: float, T_amb: float,
                 P_in: float) -> dict:
    """Inlet flow that holds the stack at ``T``, with the matching algebraic state."""
    U, I = consistent_current(params, T, P_in)
    elec = params.n_c * (U - params.U_tn) * I
    amb = -params.A_s * params.h_c * (T - T_amb)
    f_in = -(elec + amb) / (params.c_P_lye * (T_in - T))
    return {"x": np.array([T, T_in]), "y": np.array([U, I]), "u": np.array([f_in])}
