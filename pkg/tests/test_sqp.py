import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdae_nmpc.errors import LineSearchFailure
from sdae_nmpc.esdirk import NewtonSettings
from sdae_nmpc.models import linear_sdae
from sdae_nmpc.ocp import OcpConfig, OcpProblem
from sdae_nmpc.sqp import SqpSettings, damped_bfgs, sqp_solve

TIGHT = NewtonSettings(abs_tol=1e-12, rel_tol=1e-12, max_iterations=30)


def lq_problem(u_min=-50.0, u_max=50.0):
    model = linear_sdae(A=[[-0.3, 0.5], [0.0, -0.1]], By=[[0.2], [-0.4]],
                        Gx=[[0.5, -0.3]], Gy=[[-1.0]], Bu=[[0.0], [1.0]], Gu=[[0.2]],
                        Cx=[[1.0, 0.0]])
    cfg = OcpConfig(N=3, T_s=1.0, u_min=[u_min], u_max=[u_max], Q_z=[[4.0]], Q_du=[[0.5]],
                    method="ESDIRK34", steps=3, newton=TIGHT)
    return OcpProblem(model, cfg, [1.0, -0.5], [0.2], np.zeros((3, 0)), [0.8, 1.2, 1.0, 0.9])


def quadratic_model(prob):
    """Exact quadratic/linear model of the NLP from function values alone.

    With a linear DAE the discretized objective is quadratic and the
    constraints affine, so unit-step differences are exact up to roundoff.
    """
    n = prob.layout.size
    z = np.zeros(n)
    E = np.eye(n)

    def val(w):
        ev = prob.evaluate(w, derivatives=False)
        return ev.phi, ev.b

    f0, b0 = val(z)
    g = np.zeros(n)
    J = np.zeros((len(b0), n))
    fp = np.zeros(n)
    for i in range(n):
        p, bp = val(E[i])
        m, bm = val(-E[i])
        g[i] = 0.5 * (p - m)
        J[:, i] = 0.5 * (bp - bm)
        fp[i] = p
    H = np.zeros((n, n))
    for i in range(n):
        H[i, i] = fp[i] + val(-E[i])[0] - 2 * f0
    for i, j in itertools.combinations(range(n), 2):
        v = (val(E[i] + E[j])[0] - val(E[i] - E[j])[0]
             - val(E[j] - E[i])[0] + val(-E[i] - E[j])[0]) / 4
        H[i, j] = H[j, i] = v
    return f0, g, H, b0, J


@pytest.fixture(scope="module")
def lq_oracle():
    prob = lq_problem()
    _, g, H, b0, J = quadratic_model(prob)
    n, m = H.shape[0], J.shape[0]
    K = np.block([[H, J.T], [J, np.zeros((m, m))]])
    sol = np.linalg.solve(K, -np.concatenate([g, b0]))
    return sol[:n]


def test_lq_problem_converges_quickly_to_kkt_solution(lq_oracle):
    prob = lq_problem()
    w0 = prob.initial_guess([0.0], [0.2])
    res = sqp_solve(prob, w0, SqpSettings(kkt_tol=1e-9))
    assert res.converged
    assert res.iterations <= 3
    assert np.abs(res.w - lq_oracle).max() <= 1e-6 * max(1.0, np.abs(lq_oracle).max())


def test_optimal_start_stops_at_iteration_zero(lq_oracle):
    res = sqp_solve(lq_problem(), lq_oracle, SqpSettings(kkt_tol=1e-6))
    assert res.converged and res.iterations == 0


def test_bounds_are_respected_and_multipliers_signed(lq_oracle):
    prob = lq_problem(u_min=-0.2, u_max=0.2)
    L = prob.layout
    assert np.abs(lq_oracle[L.u_index]).max() > 0.2  # the bound must bite
    res = sqp_solve(prob, prob.initial_guess([0.0], [0.2]), SqpSettings(kkt_tol=1e-8))
    assert res.converged
    u = res.w[L.u_index]
    assert np.all(u >= -0.2 - 1e-12) and np.all(u <= 0.2 + 1e-12)
    at_hi, at_lo = np.isclose(u, 0.2), np.isclose(u, -0.2)
    assert at_hi.any() or at_lo.any()
    assert np.all(res.kappa[at_hi] >= -1e-8) and np.all(res.kappa[at_lo] <= 1e-8)


def test_identity_initial_hessian_also_converges(lq_oracle):
    prob = lq_problem()
    res = sqp_solve(prob, prob.initial_guess([0.0], [0.2]),
                    SqpSettings(kkt_tol=1e-8, hessian_init="identity"))
    assert res.converged
    assert np.abs(res.w - lq_oracle).max() <= 1e-5 * max(1.0, np.abs(lq_oracle).max())


def test_electrolyzer_ocp_respects_input_bounds(electrolyzer, operating_point):
    cfg = OcpConfig(N=5, T_s=240.0, u_min=[2.0], u_max=[10.0], Q_z=[[10.0]], Q_du=[[0.1]],
                    steps=3, newton=NewtonSettings(abs_tol=1e-8, rel_tol=1e-8))
    op = operating_point
    prob = OcpProblem(electrolyzer, cfg, op["x"], op["u"], op["d"], [90.0])
    res = sqp_solve(prob, prob.initial_guess(op["y"], op["u"]))
    u = res.w[prob.layout.u_index]
    assert res.converged
    assert np.all(u >= 2.0) and np.all(u <= 10.0)
    # heating as fast as possible means minimal cooling flow
    assert u[0] == pytest.approx(2.0, abs=1e-9)
    assert res.feasibility <= 1e-6


def test_initial_inputs_outside_bounds_rejected():
    prob = lq_problem(u_min=-0.2, u_max=0.2)
    with pytest.raises(ValueError):
        sqp_solve(prob, prob.initial_guess([0.0], [1.0]))


def test_line_search_failure_carries_best_iterate():
    prob = lq_problem()
    w0 = prob.initial_guess([0.0], [0.2])
    # an absurd Armijo constant rejects every step
    with pytest.raises(LineSearchFailure) as info:
        sqp_solve(prob, w0, SqpSettings(armijo=1e6, min_step=1e-3))
    assert info.value.result is not None
    assert info.value.result.status == "line-search"
    np.testing.assert_array_equal(info.value.result.w, w0)


def test_settings_validation():
    with pytest.raises(ValueError):
        SqpSettings(kkt_tol=0.0)
    with pytest.raises(ValueError):
        SqpSettings(hessian_init="exact")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_damped_bfgs_keeps_positive_definiteness(seed):
    rng = np.random.default_rng(seed)
    n = 4
    M = rng.standard_normal((n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    s, y = rng.standard_normal(n), rng.standard_normal(n)  # y's curvature may be negative
    H1 = damped_bfgs(H, s, y)
    np.testing.assert_allclose(H1, H1.T, atol=0)
    assert np.linalg.eigvalsh(H1).min() > 0
    if s @ y >= 0.2 * s @ H @ s:
        # undamped update satisfies the secant equation
        np.testing.assert_allclose(H1 @ s, y, rtol=1e-8, atol=1e-10)
