import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdae_nmpc.esdirk import NewtonSettings, integrate
from sdae_nmpc.model import solve_consistent_algebraic
from sdae_nmpc.models import coupled_oscillator, linear_sdae
from sdae_nmpc.ocp import (Layout, OcpConfig, OcpProblem, eval_nlp, relaxation,
                           shoot_interval, shoot_intervals, warm_start_shift)

TIGHT = NewtonSettings(abs_tol=1e-12, rel_tol=1e-12, max_iterations=30)


def integrator_model():
    # x' = u with a trivial algebraic y = 0
    return linear_sdae(A=[[0.0]], By=[[0.0]], Gx=[[0.0]], Gy=[[1.0]], Bu=[[1.0]])


def osc_config(N=3, **kw):
    base = dict(N=N, T_s=0.5, u_min=[-3.0], u_max=[3.0], Q_z=[[2.0]], Q_du=[[0.3]],
                method="ESDIRK34", steps=4, newton=TIGHT)
    base.update(kw)
    return OcpConfig(**base)


def plain_trajectory(model, x0, u_seq, cfg):
    """Nodes of the unrelaxed DAE integrated interval by interval."""
    y0 = solve_consistent_algebraic(model, 0.0, x0, u_seq[0], np.zeros(0), np.zeros(model.ny))
    s = np.concatenate([x0, y0])
    wx, wy = [s[:model.nx]], []
    for j, u in enumerate(u_seq):
        t = j * cfg.T_s
        y = solve_consistent_algebraic(model, t, s[:model.nx], u, np.zeros(0), s[model.nx:],
                                       tol=1e-14)
        s = np.concatenate([s[:model.nx], y])
        wy.append(y)
        tr = integrate(model, cfg.method, t, t + cfg.T_s, s, u, np.zeros(0), cfg.steps,
                       settings=cfg.newton)
        s = tr.final
        wx.append(s[:model.nx])
    return np.array(wx), np.array(wy), s


def test_relaxation_is_one_at_the_node():
    assert relaxation(3.0, 3.0, 0.7) == 1.0
    assert relaxation(3.7, 3.0, 0.7, eta=2.0) == pytest.approx(np.exp(-2.0))


def test_consistent_node_reproduces_plain_integration():
    model = coupled_oscillator()
    cfg = osc_config()
    x0, u = np.array([0.4, -0.2]), np.array([0.8])
    y0 = solve_consistent_algebraic(model, 0.0, x0, u, np.zeros(0), np.zeros(1))
    res = shoot_interval(model, x0, y0, u, np.zeros(0), 0.0, cfg.T_s, [0.0], cfg,
                         sensitivities=False)
    ref = integrate(model, cfg.method, 0.0, cfg.T_s, np.concatenate([x0, y0]), u,
                    np.zeros(0), cfg.steps, settings=cfg.newton)
    np.testing.assert_allclose(res.endpoint, ref.final, rtol=0, atol=1e-14)


def test_true_trajectory_is_feasible():
    model = coupled_oscillator()
    cfg = osc_config()
    x0 = np.array([0.4, -0.2])
    u_seq = np.array([[0.8], [-0.5], [1.2]])
    wx, wy, _ = plain_trajectory(model, x0, u_seq, cfg)
    prob = OcpProblem(model, cfg, x0, [0.8], np.zeros((cfg.N, 0)), [0.0])
    ev = prob.evaluate(prob.layout.join(wx, wy, u_seq), derivatives=False)
    np.testing.assert_allclose(ev.b, 0.0, atol=1e-12)


def test_zero_cost_when_output_equals_setpoint():
    model = integrator_model()
    cfg = OcpConfig(N=2, T_s=1.0, u_min=[-1.0], u_max=[1.0], Q_z=[[5.0]], Q_du=[[1.0]],
                    newton=TIGHT)
    L = Layout(1, 1, 1, 2)
    w = L.join(np.full((3, 1), 1.5), np.zeros((2, 1)), np.zeros((2, 1)))
    ev = eval_nlp(model, w, [1.5], [0.0], np.zeros((2, 0)), [1.5], cfg)
    assert ev.phi == 0.0
    np.testing.assert_array_equal(ev.grad, 0.0)
    np.testing.assert_array_equal(ev.b, 0.0)


def test_running_cost_closed_form():
    # l = int_0^T 1/2 q (x0 + u t - zbar)^2 dt; quadratic integrand, exact at order 3
    method = "ESDIRK34"
    q, x0, u, zbar, T = 3.0, 0.7, -0.4, 0.2, 2.0
    cfg = OcpConfig(N=1, T_s=T, u_min=[-1.0], u_max=[1.0], Q_z=[[q]], method=method,
                    steps=3, newton=TIGHT)
    res = shoot_interval(integrator_model(), [x0], [0.0], [u], np.zeros(0), 0.0, T,
                         [zbar], cfg)
    e0, e1 = x0 - zbar, x0 - zbar + u * T
    exact = q * (e1**3 - e0**3) / (6 * u)
    assert res.cost == pytest.approx(exact, rel=1e-13)
    assert res.endpoint[0] == pytest.approx(x0 + u * T, abs=1e-13)


def test_zero_move_cost_for_constant_input():
    model = integrator_model()
    cfg = OcpConfig(N=3, T_s=1.0, u_min=[-1.0], u_max=[1.0], Q_z=[[0.0]], Q_du=[[7.0]],
                    newton=TIGHT)
    L = Layout(1, 1, 1, 3)
    w = L.join(np.array([[0.0], [0.3], [0.6], [0.9]]), np.zeros((3, 1)), np.full((3, 1), 0.3))
    ev = eval_nlp(model, w, [0.0], [0.3], np.zeros((3, 0)), [0.0], cfg)
    assert ev.phi == pytest.approx(0.0, abs=1e-15)
    ev = eval_nlp(model, w, [0.0], [0.1], np.zeros((3, 0)), [0.0], cfg)
    assert ev.phi == pytest.approx(0.5 * 7.0 * 0.2**2, rel=1e-12)


def fd_derivatives(prob, w, eps=1e-6):
    n = len(w)
    ev0 = prob.evaluate(w, derivatives=False)
    g = np.zeros(n)
    J = np.zeros((len(ev0.b), n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = eps * max(1.0, abs(w[i]))
        p = prob.evaluate(w + e, derivatives=False)
        m = prob.evaluate(w - e, derivatives=False)
        g[i] = (p.phi - m.phi) / (2 * e[i])
        J[:, i] = (p.b - m.b) / (2 * e[i])
    return g, J


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_and_jacobian_against_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = coupled_oscillator()
    cfg = osc_config()
    L = Layout(2, 1, 1, cfg.N)
    w = L.join(rng.uniform(-0.5, 0.5, (cfg.N + 1, 2)), rng.uniform(-0.5, 0.5, (cfg.N, 1)),
               rng.uniform(-1, 1, (cfg.N, 1)))
    prob = OcpProblem(model, cfg, [0.1, 0.2], [0.3], np.zeros((cfg.N, 0)),
                      [0.2, 0.1, -0.1, 0.0])
    ev = prob.evaluate(w)
    g_fd, J_fd = fd_derivatives(prob, w)
    assert np.abs(ev.grad - g_fd).max() <= 1e-5 * max(1.0, np.abs(g_fd).max())
    assert np.abs(ev.jac - J_fd).max() <= 1e-5 * max(1.0, np.abs(J_fd).max())


def test_batched_shooting_equals_individual_intervals():
    model = coupled_oscillator()
    cfg = osc_config()
    rng = np.random.default_rng(4)
    wx, wy, u = rng.uniform(-0.5, 0.5, (3, 2)), rng.uniform(-0.5, 0.5, (3, 1)), rng.uniform(-1, 1, (3, 1))
    t = np.array([0.0, 0.5, 1.0])
    zb = np.array([[0.1], [0.2], [0.3]])
    res = shoot_intervals(model, wx, wy, u, np.zeros((3, 0)), t, 0.5, zb, cfg)
    for j in range(3):
        one = shoot_interval(model, wx[j], wy[j], u[j], np.zeros(0), t[j], t[j] + 0.5, zb[j], cfg)
        np.testing.assert_allclose(res.endpoint[j], one.endpoint, atol=1e-14)
        np.testing.assert_allclose(res.d_endpoint[j], one.d_endpoint, atol=1e-13)
        assert res.cost[j] == pytest.approx(one.cost, abs=1e-15)


def test_warm_start_shift_indices():
    L = Layout(2, 1, 1, 2)
    w = np.arange(L.size, dtype=float)
    # blocks: [x0 x0 y0 u0 | x1 x1 y1 u1 | x2 x2] = [0 1 2 3 | 4 5 6 7 | 8 9]
    shifted = warm_start_shift(w, L)
    np.testing.assert_array_equal(shifted, [4, 5, 6, 7, 8, 9, 6, 7, 8, 9])
    assert len(shifted) == L.size


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 2), st.integers(1, 2))
def test_warm_start_of_replicated_point_is_fixed(N, nx, ny, nu):
    L = Layout(nx, ny, nu, N)
    rng = np.random.default_rng(N + 10 * nx)
    x, y, u = rng.standard_normal(nx), rng.standard_normal(ny), rng.standard_normal(nu)
    w = L.join(np.tile(x, (N + 1, 1)), np.tile(y, (N, 1)), np.tile(u, (N, 1)))
    np.testing.assert_array_equal(warm_start_shift(w, L), w)
    wx, wy, uu = L.split(w)
    np.testing.assert_array_equal(L.join(wx, wy, uu), w)
    assert sorted(np.concatenate([L.u_index, L.state_index]).tolist()) == list(range(L.size))


def test_config_validation():
    with pytest.raises(ValueError):
        OcpConfig(N=0)
    with pytest.raises(ValueError):
        OcpConfig(u_min=[3.0], u_max=[2.0])
    with pytest.raises(ValueError):
        OcpConfig(Q_z=[[-1.0]])
