import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdae_nmpc.cdekf import output_matrix
from sdae_nmpc.electrolyzer import (cell_voltage, consistent_current, electrolyzer_f,
                                    electrolyzer_g, electrolyzer_model, heat_terms, load_params,
                                    parse_params, power_scale, steady_state)
from sdae_nmpc.errors import DomainError, ParseError
from sdae_nmpc.model import solve_consistent_algebraic

D = np.array([25.0, 2.0e6])


def test_bundled_parameters(params):
    assert params.sigma == 0.03
    assert params.n_c == 230
    assert params.U_tn == pytest.approx(1.482)


def test_drift_vanishes_at_thermal_balance(params):
    T = 40.0
    x = np.array([T, T])
    y = np.array([params.U_tn, 1000.0])
    dx = electrolyzer_f(0.0, x, y, np.array([4.0]), np.array([T, 2e6]), params)
    np.testing.assert_array_equal(dx, [0.0, 0.0])


def test_lye_term_is_linear_in_flow(params):
    x, y = np.array([70.0, 30.0]), np.array([2.2, 3900.0])
    lye1 = heat_terms(params, x, y, np.array([3.0]), D)[0]
    lye2 = heat_terms(params, x, y, np.array([6.0]), D)[0]
    assert lye2 == 2 * lye1


def test_drift_hand_evaluation(params):
    T, T_in, f_in = 70.0, 30.0, 5.0
    U, I = consistent_current(params, T, 2e6)
    by_hand = (f_in * 3100.0 * (T_in - T) + 230 * (U - 1.482) * I
               - 15.0 * 15.0 * (T - 25.0)) / 5.0e6
    dx = electrolyzer_f(0.0, np.array([T, T_in]), np.array([U, I]), np.array([f_in]), D, params)
    assert dx[0] == pytest.approx(by_hand, rel=1e-12)
    assert dx[1] == 0.0


def test_zero_current_voltage_residual(params):
    r = electrolyzer_g(0.0, np.array([70.0, 30.0]), np.array([1.9, 0.0]), np.array([4.0]), D,
                       params)
    assert r[0] == pytest.approx(1.9 - params.U_rev, abs=1e-15)


def test_power_residual_is_bilinear(params):
    U, I = consistent_current(params, 70.0, 2e6)
    x, u = np.array([70.0, 30.0]), np.array([4.0])
    r0 = electrolyzer_g(0.0, x, np.array([U, I]), u, D, params)[1]
    assert abs(r0) < 1e-9
    delta = 3.0
    r1 = electrolyzer_g(0.0, x, np.array([U, I + delta]), u, D, params)[1]
    assert r1 - r0 == pytest.approx(-params.n_c * U * delta / power_scale(params), rel=1e-9)


def test_consistent_pair_agrees_with_newton(params, electrolyzer):
    U, I = consistent_current(params, 70.0, 2e6)
    y = solve_consistent_algebraic(electrolyzer, 0.0, np.array([70.0, 30.0]), [5.0], D,
                                   [2.0, 3000.0])
    assert y[0] == pytest.approx(U, rel=1e-8)
    assert y[1] == pytest.approx(I, rel=1e-8)
    assert I == pytest.approx(3948.464434, rel=1e-8)
    assert U == pytest.approx(2.2022871, rel=1e-7)


def test_output_selectors(electrolyzer, operating_point):
    p = operating_point
    args = (0.0, p["x"], p["y"], p["u"], p["d"])
    np.testing.assert_array_equal(electrolyzer.m_x(*args), [[1.0, 0.0]])
    np.testing.assert_array_equal(electrolyzer.m_y(*args), [[0.0, 0.0]])
    np.testing.assert_array_equal(electrolyzer.h(*args), [p["x"][0]])
    np.testing.assert_array_equal(output_matrix(electrolyzer, *args), [[1.0, 0.0]])


def test_diffusion_acts_on_inlet_temperature_only(params):
    model = electrolyzer_model(params, sigma=0.05)
    np.testing.assert_array_equal(model.sigma, [[0.0], [0.05]])


def test_steady_state_is_an_equilibrium(params, electrolyzer):
    ss = steady_state(params, 75.0, 30.0, 25.0, 2e6)
    f = electrolyzer.f(0.0, ss["x"], ss["y"], ss["u"], D)
    g = electrolyzer.g(0.0, ss["x"], ss["y"], ss["u"], D)
    assert np.abs(f).max() < 1e-12
    assert np.abs(g).max() < 1e-9
    assert ss["u"][0] == pytest.approx(4.4340, abs=1e-4)


def test_activation_domain_error(params):
    bad = params.replace(t1=-10.0, t2=0.0, t3=0.0)
    with pytest.raises(DomainError):
        cell_voltage(bad, 70.0, 100.0)


def test_parse_rejects_bad_files():
    text = load_params.__globals__["resources"].files("sdae_nmpc").joinpath(
        "data").joinpath("electrolyzer_default.conf").read_text()
    assert parse_params(text) == load_params()
    with pytest.raises(ParseError, match="unknown"):
        parse_params(text + "\nfoo = 1\n")
    with pytest.raises(ParseError, match="duplicate"):
        parse_params(text + "\nA = 1\n")
    with pytest.raises(ParseError, match="missing"):
        parse_params("A = 1\n")
    with pytest.raises(ParseError, match="not a number"):
        parse_params(text.replace("A       = 2.5", "A = two"))


def test_load_params_from_path(tmp_path):
    src = load_params()
    lines = [f"{k} = {getattr(src, k)!r}" for k in src.__dataclass_fields__]
    path = tmp_path / "p.conf"
    path.write_text("\n".join(lines).replace("h_c = 15.0", "h_c = 20.0"))
    assert load_params(path).h_c == 20.0


@settings(max_examples=30, deadline=None)
@given(st.floats(40, 90), st.floats(5e5, 3e6))
def test_bisection_pair_is_consistent(T, P_in):
    p = load_params()
    U, I = consistent_current(p, T, P_in)
    r = electrolyzer_g(0.0, np.array([T, 30.0]), np.array([U, I]), np.array([5.0]),
                       np.array([25.0, P_in]), p)
    assert abs(r[0]) < 1e-9
    assert abs(r[1]) * power_scale(p) < 1e-6 * P_in
