import copy

import numpy as np
import pytest

from sdae_nmpc.electrolyzer import steady_state
from sdae_nmpc.nmpc import run_closed_loop
from sdae_nmpc.scenario import DEFAULTS, build_scenario


def quiet_config(**changes):
    cfg = copy.deepcopy(DEFAULTS)
    cfg["plant"]["sigma"] = 0.0
    cfg["measurement"]["noise"] = 0.0
    cfg["ocp"]["N"] = 10
    cfg["ocp"]["horizon"] = 40.0
    for key, val in changes.items():
        cfg[key] = val
    return cfg


def test_equilibrium_is_a_fixed_point(params):
    cfg = quiet_config(total_steps=4, setpoint=[[0.0, 70.0]])
    cfg["filter"] = {"x0": [70.0, 30.0], "P0": [1.0, 1.0]}
    cfg["measurement"]["R"] = 1e-6
    log = run_closed_loop(build_scenario(cfg))
    u_ss = steady_state(params, 70.0, 30.0, 25.0, 2.0e6)["u"]
    X = log.array("x_true")
    np.testing.assert_allclose(X, np.tile([70.0, 30.0], (4, 1)), atol=1e-8)
    np.testing.assert_allclose(log.array("u")[:, 0], u_ss[0], rtol=1e-6)
    np.testing.assert_allclose(log.array("x_filt"), X, atol=1e-6)


def test_single_step_gives_one_record():
    cfg = quiet_config(total_steps=1)
    log = run_closed_loop(build_scenario(cfg))
    assert len(log) == 1
    rec = log.steps[0]
    assert rec.t == 0.0
    assert 2.0 <= rec.u[0] <= 10.0
    assert log.x_final.shape == (2,) and log.final_estimate is not None


def test_setpoint_step_settles():
    # 70 -> 75 degC; the band must be reached and then held
    cfg = quiet_config(total_steps=20, setpoint=[[0.0, 75.0]])
    cfg["filter"]["x0"] = [70.0, 30.0]
    log = run_closed_loop(build_scenario(cfg))
    T = np.append(log.array("x_true")[:, 0], log.x_final[0])
    err = np.abs(T - 75.0)
    inside = np.flatnonzero(err <= 1.0)
    assert inside.size
    assert np.all(err[inside[0]:] <= 1.0)
    assert err[-1] < 0.1
    assert np.all(log.array("sqp_converged"))


def test_noise_is_reproducible_per_seed():
    cfg = copy.deepcopy(DEFAULTS)
    cfg["total_steps"] = 3
    cfg["ocp"]["N"] = 5
    cfg["ocp"]["horizon"] = 20.0
    a = run_closed_loop(build_scenario(cfg, seed=3))
    b = run_closed_loop(build_scenario(cfg, seed=3))
    c = run_closed_loop(build_scenario(cfg, seed=4))
    np.testing.assert_array_equal(a.array("x_true"), b.array("x_true"))
    np.testing.assert_array_equal(a.array("u"), b.array("u"))
    assert not np.array_equal(a.array("y_meas"), c.array("y_meas"))


@pytest.mark.slow
def test_bundled_scenario_ends_each_segment_in_band():
    cfg = copy.deepcopy(DEFAULTS)
    log = run_closed_loop(build_scenario(cfg))
    U = log.array("u")[:, 0]
    assert np.all((U >= 2.0) & (U <= 10.0))
    T = np.append(log.array("x_true")[:, 0], log.x_final[0])
    t = np.arange(T.size) * cfg["sampling_time"]
    changes = [c[0] for c in cfg["setpoint"][1:]]
    # last sample before each change, and the final sample
    ends = [int(np.flatnonzero(t < c)[-1]) for c in changes] + [T.size - 1]
    levels = [s[1] for s in cfg["setpoint"]]
    for idx, level in zip(ends, levels):
        assert abs(T[idx] - level) <= 1.0
