"""Model interface for semi-explicit index-1 stochastic DAEs.

A :class:`Model` bundles the drift ``f``, the algebraic constraint ``g``,
the measurement function ``m`` and the controlled output ``h``, all with
signature ``fun(t, x, y, u, d)``, together with a constant diffusion matrix
``sigma``.  Every function must broadcast over leading (batch) dimensions:
``x`` may have shape ``(nx,)`` or ``(B, nx)`` and the result then has shape
``(n,)`` or ``(B, n)``.  Partial derivatives return ``(..., n_out, n_in)``.

Partials that are not supplied are replaced at construction time by central
finite differences (see :func:`fd_partial`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NoConvergence, NonFiniteEvaluation, SingularJacobian

CONSISTENCY_TOL = 1e-10
CONSISTENCY_MAXITER = 50

_EPS3 = np.finfo(float).eps ** (1.0 / 3.0)

_ARGNAMES = ("x", "y", "u", "d")
_PARTIALS = {
    "f": ("x", "y", "u"),
    "g": ("x", "y", "u"),
    "m": ("x", "y", "u"),
    "h": ("x", "y", "u"),
}


def fd_partial(fun: Callable, wrt: str) -> Callable:
    """Return a central-difference approximation of ``d fun / d wrt``.

    The step for column ``j`` is ``eps**(1/3) * max(1, |v_j|)``, computed per
    batch element.
    """
    argnum = _ARGNAMES.index(wrt)

    def partial(t, x, y, u, d):
        args = [np.asarray(a, dtype=float) for a in (x, y, u, d)]
        v = args[argnum]
        n = v.shape[-1]
        if n == 0:
            out = np.asarray(fun(t, *args), dtype=float)
            return np.zeros(out.shape + (0,))
        cols = []
        for j in range(n):
            step = _EPS3 * np.maximum(1.0, np.abs(v[..., j]))
            vp = v.copy()
            vm = v.copy()
            vp[..., j] += step
            vm[..., j] -= step
            ap = list(args)
            am = list(args)
            ap[argnum] = vp
            am[argnum] = vm
            fp = np.asarray(fun(t, *ap), dtype=float)
            fm = np.asarray(fun(t, *am), dtype=float)
            if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
                raise NonFiniteEvaluation(
                    f"non-finite value while differencing w.r.t. {wrt}[{j}]")
            width = vp[..., j] - vm[..., j]
            cols.append((fp - fm) / np.expand_dims(width, -1))
        return np.stack(cols, axis=-1)

    return partial


@dataclass
class Model:
    """User-supplied SDAE ``dx = f dt + sigma dw``, ``0 = g``, ``y_m = m + v``, ``z = h``.

    Parameters
    ----------
    nx, ny, nu, nd : int
        Dimensions of differential states, algebraic states, inputs and
        disturbances.
    f, g : callable
        Drift and algebraic constraint.  ``g`` must have ``ny`` components and
        ``dg/dy`` must be nonsingular (index 1).
    m, h : callable, optional
        Measurement and output functions.
    sigma : array_like, shape (nx, nw), optional
        Constant diffusion matrix.  Defaults to zero with ``nw = nx``.
    f_x, f_y, ... : callable, optional
        Analytic partials.  Missing ones are filled by finite differences.
    """

    nx: int
    ny: int
    nu: int
    nd: int
    f: Callable
    g: Callable
    m: Optional[Callable] = None
    h: Optional[Callable] = None
    sigma: Optional[np.ndarray] = None
    f_x: Optional[Callable] = None
    f_y: Optional[Callable] = None
    f_u: Optional[Callable] = None
    g_x: Optional[Callable] = None
    g_y: Optional[Callable] = None
    g_u: Optional[Callable] = None
    m_x: Optional[Callable] = None
    m_y: Optional[Callable] = None
    m_u: Optional[Callable] = None
    h_x: Optional[Callable] = None
    h_y: Optional[Callable] = None
    h_u: Optional[Callable] = None
    name: str = "model"
    analytic: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.sigma is None:
            self.sigma = np.zeros((self.nx, self.nx))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if self.sigma.shape[0] != self.nx:
            raise ValueError(
                f"sigma must have {self.nx} rows, got shape {self.sigma.shape}")
        for fun, args in _PARTIALS.items():
            base = getattr(self, fun)
            for wrt in args:
                attr = f"{fun}_{wrt}"
                supplied = getattr(self, attr) is not None
                self.analytic[attr] = supplied
                if not supplied and base is not None:
                    setattr(self, attr, fd_partial(base, wrt))

    @property
    def ns(self) -> int:
        return self.nx + self.ny

    @property
    def nw(self) -> int:
        return self.sigma.shape[1]

    @property
    def nm(self) -> int:
        return len(np.atleast_1d(self.m(0.0, np.zeros(self.nx), np.zeros(self.ny),
                                        np.zeros(self.nu), np.zeros(self.nd))))

    def split(self, s):
        s = np.asarray(s, dtype=float)
        return s[..., :self.nx], s[..., self.nx:]

    def dae_jacobians(self, t, x, y, u, d):
        """Return ``(f_x, f_y, f_u, g_x, g_y, g_u)`` at one (batched) point."""
        return (self.f_x(t, x, y, u, d), self.f_y(t, x, y, u, d),
                self.f_u(t, x, y, u, d), self.g_x(t, x, y, u, d),
                self.g_y(t, x, y, u, d), self.g_u(t, x, y, u, d))

    def with_sigma(self, sigma) -> "Model":
        """Copy of the model with a different diffusion matrix."""
        kwargs = {name: getattr(self, name) for name in (
            "nx", "ny", "nu", "nd", "f", "g", "m", "h", "name")}
        for attr, supplied in self.analytic.items():
            if supplied:
                kwargs[attr] = getattr(self, attr)
        return Model(sigma=sigma, **kwargs)


@dataclass
class ConsistentPoint:
    t: float
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    d: np.ndarray

    def residual(self, model: Model) -> float:
        return float(np.max(np.abs(model.g(self.t, self.x, self.y, self.u, self.d)),
                            initial=0.0))


def solve_consistent_algebraic(model: Model, t, x, u, d, y_guess,
                               tol: float = CONSISTENCY_TOL,
                               max_iterations: int = CONSISTENCY_MAXITER):
    """Solve ``g(t, x, y, u, d) = 0`` for ``y`` by exact Newton iteration.

    Full steps ``dy = -(dg/dy)^-1 g``; the residual is checked before every
    correction so a consistent guess is returned unchanged.  Works on batched
    inputs, in which case every batch element must converge.

    Raises
    ------
    NoConvergence
        If ``max |g| > tol`` after ``max_iterations`` corrections.
    SingularJacobian
        If ``dg/dy`` cannot be factorized.
    """
    y = np.array(y_guess, dtype=float, copy=True)
    x, u, d = (np.asarray(a, dtype=float) for a in (x, u, d))
    for it in range(max_iterations + 1):
        res = np.asarray(model.g(t, x, y, u, d), dtype=float)
        if not np.all(np.isfinite(res)):
            raise NonFiniteEvaluation("non-finite algebraic residual")
        if np.max(np.abs(res), initial=0.0) <= tol:
            return y
        if it == max_iterations:
            break
        gy = model.g_y(t, x, y, u, d)
        try:
            step = np.linalg.solve(gy, res[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian("dg/dy is singular") from exc
        y = y - step
    raise NoConvergence(
        f"algebraic Newton did not reach |g| <= {tol:g} in {max_iterations} "
        f"iterations (|g| = {np.max(np.abs(res)):.3e})", iterations=max_iterations)


def algebraic_sensitivity(model: Model, t, x, y, u, d):
    """``dy/dx`` along the constraint manifold, ``-(g_y)^-1 g_x``."""
    gy = model.g_y(t, x, y, u, d)
    gx = model.g_x(t, x, y, u, d)
    try:
        return -np.linalg.solve(gy, gx)
    except np.linalg.LinAlgError as exc:
        raise SingularJacobian("dg/dy is singular") from exc


def finite_difference_jacobians(model: Model, point: ConsistentPoint) -> dict:
    """Central-difference approximations of every partial of ``f, g, m, h``.

    Always differences the raw model functions, even where analytic partials
    exist, so the result can be used to check them.
    """
    args = (point.t, point.x, point.y, point.u, point.d)
    out = {}
    for fun, wrts in _PARTIALS.items():
        base = getattr(model, fun)
        if base is None:
            continue
        for wrt in wrts:
            out[f"{fun}_{wrt}"] = fd_partial(base, wrt)(*args)
    return out
