"""Butcher tableaus and stage value predictors for ESDIRK12, ESDIRK23 and ESDIRK34.

Coefficients are derived from order conditions under the stiffly accurate
ESDIRK structure (explicit first stage, constant diagonal ``gamma``, last row
of ``A`` equal to ``b``) rather than copied from a table:

* ESDIRK12: implicit Euler advancing, trapezoidal embedded weights.
* ESDIRK23: ``gamma = 1 - 1/sqrt(2)``, ``c2 = 2 gamma``, ``b = [b1, b1, gamma]``,
  embedded weights of order 3.
* ESDIRK34: ``gamma`` the root near 0.4358665 of ``6g^3 - 18g^2 + 9g - 1``
  (R(inf) = 0), ``c2 = 2 gamma``, remaining coefficients from the order-3
  conditions of the advancing method and the order-4 conditions of the
  embedded one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

log = logging.getLogger(__name__)

METHODS = ("ESDIRK12", "ESDIRK23", "ESDIRK34")


@dataclass(frozen=True)
class ButcherTableau:
    name: str
    A: np.ndarray
    b: np.ndarray
    b_hat: np.ndarray
    c: np.ndarray
    gamma: float
    order: int
    embedded_order: int

    @property
    def stages(self) -> int:
        return len(self.b)


@dataclass(frozen=True)
class PredictorCoefficients:
    """``S_i^0 = alpha[i] * s_{k-1} + sum_j beta[i, j] * S_hat_j`` for stages ``i >= 2``.

    Columns of ``beta`` refer to the previous step's stages ``2..n_s``; the
    last one is the previous step's end point ``s_k``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    r: float
    trivial: bool = False


# Butcher trees up to order 4 as (weight functional, expected value).
def order_conditions(b, A, c, order: int) -> np.ndarray:
    """Residuals of the classical Runge-Kutta order conditions up to ``order``."""
    b = np.asarray(b, dtype=float)
    res = [b.sum() - 1.0]
    if order >= 2:
        res.append(b @ c - 1 / 2)
    if order >= 3:
        res += [b @ c**2 - 1 / 3, b @ A @ c - 1 / 6]
    if order >= 4:
        res += [b @ c**3 - 1 / 4, b @ (c * (A @ c)) - 1 / 8,
                b @ A @ c**2 - 1 / 12, b @ A @ A @ c - 1 / 24]
    if order > 4:
        raise ValueError("order conditions implemented up to order 4")
    return np.array(res)


def _esdirk12() -> ButcherTableau:
    A = np.array([[0.0, 0.0], [0.0, 1.0]])
    return ButcherTableau("ESDIRK12", A, A[-1].copy(), np.array([0.5, 0.5]),
                          A.sum(axis=1), 1.0, 1, 2)


def _esdirk23() -> ButcherTableau:
    # b = [b1, b1, g]: sum(b) = 1 and b.c = 1/2 with c = [0, 2g, 1]
    # give g^2 - 2g + 1/2 = 0.
    g = 1.0 - 1.0 / np.sqrt(2.0)
    b1 = (1.0 - g) / 2.0
    A = np.array([[0.0, 0.0, 0.0], [g, g, 0.0], [b1, b1, g]])
    c = A.sum(axis=1)
    b_hat = np.linalg.solve(np.vander(c, 3, increasing=True).T, [1.0, 1 / 2, 1 / 3])
    return ButcherTableau("ESDIRK23", A, A[-1].copy(), b_hat, c, g, 2, 3)


def _esdirk34_gamma() -> float:
    roots = np.roots([6.0, -18.0, 9.0, -1.0])
    real = roots[np.abs(roots.imag) < 1e-12].real
    g = real[(real > 1 / 3) & (real < 1 / 2)][0]
    # polish on the cubic
    for _ in range(3):
        g -= (6 * g**3 - 18 * g**2 + 9 * g - 1) / (18 * g**2 - 36 * g + 9)
    return float(g)


def _esdirk34_from(params, g):
    c3, a32 = params
    c = np.array([0.0, 2 * g, c3, 1.0])
    # advancing weights: b4 = g and quadrature conditions of order 3
    V = np.vander(c[:3], 3, increasing=True).T
    rhs = np.array([1.0, 1 / 2, 1 / 3]) - g * np.array([1.0, 1.0, 1.0])
    b = np.append(np.linalg.solve(V, rhs), g)
    A = np.zeros((4, 4))
    A[1, :2] = [g, g]
    A[2, :3] = [c3 - g - a32, a32, g]
    A[3] = b
    b_hat = np.linalg.solve(np.vander(c, 4, increasing=True).T,
                            [1.0, 1 / 2, 1 / 3, 1 / 4])
    return A, b, b_hat, c


def _esdirk34() -> ButcherTableau:
    g = _esdirk34_gamma()

    def residual(p):
        A, b, b_hat, c = _esdirk34_from(p, g)
        return np.concatenate([order_conditions(b, A, c, 3)[3:],
                               order_conditions(b_hat, A, c, 4)[4:]])

    sol = least_squares(residual, x0=[0.5, -0.1], xtol=1e-15, ftol=1e-15, gtol=1e-15)
    A, b, b_hat, c = _esdirk34_from(sol.x, g)
    return ButcherTableau("ESDIRK34", A, A[-1].copy(), b_hat, c, g, 3, 4)


_BUILDERS = {"ESDIRK12": _esdirk12, "ESDIRK23": _esdirk23, "ESDIRK34": _esdirk34}
_CACHE: dict = {}


def make_tableau(method: str) -> ButcherTableau:
    """Return the tableau for ``'ESDIRK12'``, ``'ESDIRK23'`` or ``'ESDIRK34'``."""
    key = method.upper()
    if key not in _BUILDERS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if key not in _CACHE:
        _CACHE[key] = _BUILDERS[key]()
    return _CACHE[key]


def stability_function(tab: ButcherTableau, z: complex) -> complex:
    """Linear stability function ``R(z) = 1 + z b^T (I - zA)^-1 1``."""
    n = tab.stages
    e = np.ones(n)
    return 1.0 + z * tab.b @ np.linalg.solve(np.eye(n) - z * tab.A, e)


def trivial_predictor(tab: ButcherTableau) -> PredictorCoefficients:
    n = tab.stages - 1
    alpha = np.zeros(n)
    beta = np.zeros((n, n))
    beta[:, -1] = 1.0
    return PredictorCoefficients(alpha, beta, 1.0, trivial=True)


def predictor_nodes(tab: ButcherTableau, r: float = 1.0):
    """Interpolation nodes (in units of the previous step) and stage targets."""
    nodes = np.concatenate([[-1.0], tab.c[1:] - 1.0])
    targets = r * tab.c[1:]
    return nodes, targets


def compute_predictor_coefficients(tab: ButcherTableau, r: float = 1.0) -> PredictorCoefficients:
    """Extrapolation weights from the previous step's data to the current stages.

    Row ``i`` reproduces polynomials of degree ``< n_s`` exactly: the data
    ``s_{k-1}`` at ``-1`` and the previous stages at ``c_j - 1`` are
    extrapolated to ``r c_i``.  A singular node set falls back to the
    trivial predictor with a warning.
    """
    if r <= 0:
        raise ValueError("step ratio must be positive")
    nodes, targets = predictor_nodes(tab, r)
    n = len(nodes)
    V = np.vander(nodes, n, increasing=True).T
    rhs = np.vander(targets, n, increasing=True).T
    try:
        if np.linalg.cond(V) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned predictor conditions")
        W = np.linalg.solve(V, rhs).T
    except np.linalg.LinAlgError as exc:
        log.warning("predictor conditions singular for %s (%s); using trivial predictor",
                    tab.name, exc)
        return trivial_predictor(tab)
    return PredictorCoefficients(W[:, 0].copy(), W[:, 1:].copy(), r)


def predictor_residuals(tab: ButcherTableau, pred: PredictorCoefficients) -> np.ndarray:
    """Residuals of the polynomial-exactness conditions, one row per stage."""
    nodes, targets = predictor_nodes(tab, pred.r)
    n = len(nodes)
    W = np.column_stack([pred.alpha, pred.beta])
    return W @ np.vander(nodes, n, increasing=True) - np.vander(targets, n, increasing=True)
