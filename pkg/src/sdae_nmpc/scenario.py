"""Scenario files (YAML, times in minutes) and their conversion to :class:`Scenario`.

Schema (all keys optional except where noted; unknown keys are errors)::

    model: electrolyzer
    parameters: null            # path of a parameter .conf, null = bundled set
    sampling_time: 4.0          # min
    total_steps: 36
    seed: 42
    integrator: {method: ESDIRK34, steps_per_interval: 5, newton_tol: 1.0e-8}
    plant: {steps_per_interval: 20, sigma: 0.03}
    measurement: {R: 1.0, noise: 1.0}   # filter covariance, actual noise covariance
    initial_state: {x: [70.0, 30.0]}    # y is solved for consistency
    initial_input: steady               # or a number (kg/s)
    filter: {x0: [70.0, 35.0], P0: [1.0, 25.0]}
    ocp: {N: 25, horizon: 100.0, Q_z: 10.0, Q_du: 0.1, u_min: 2.0, u_max: 10.0, eta: 1.0}
    sqp: {max_iterations: 100, kkt_tol: 1.0e-6}
    setpoint: [[0.0, 75.0], [48.0, 60.0], [96.0, 75.0]]   # (time min, value), held
    disturbance: {T_amb: [[0.0, 25.0]], P_in: [[0.0, 2.0e6]]}
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .cdekf import PredictionConfig
from .errors import ParseError
from .esdirk import NewtonSettings
from .model import solve_consistent_algebraic
from .nmpc import Scenario
from .ocp import OcpConfig
from .sdae_sim import SimConfig
from .sqp import SqpSettings
from .tableau import METHODS

MINUTE = 60.0
DEFAULT_SCENARIO = "default_scenario.yaml"

DEFAULTS = {
    "model": "electrolyzer",
    "parameters": None,
    "sampling_time": 4.0,
    "total_steps": 36,
    "seed": 42,
    "integrator": {"method": "ESDIRK34", "steps_per_interval": 5, "newton_tol": 1e-8},
    "plant": {"steps_per_interval": 20, "sigma": 0.03},
    "measurement": {"R": 1.0, "noise": 1.0},
    "initial_state": {"x": [70.0, 30.0]},
    "initial_input": "steady",
    "filter": {"x0": [70.0, 35.0], "P0": [1.0, 25.0]},
    "ocp": {"N": 25, "horizon": 100.0, "Q_z": 10.0, "Q_du": 0.1,
            "u_min": 2.0, "u_max": 10.0, "eta": 1.0},
    "sqp": {"max_iterations": 100, "kkt_tol": 1e-6},
    "setpoint": [[0.0, 75.0], [48.0, 60.0], [96.0, 75.0]],
    "disturbance": {"T_amb": [[0.0, 25.0]], "P_in": [[0.0, 2.0e6]]},
}


def _merge(base: dict, new: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in new.items():
        if key not in base:
            raise ParseError(f"unknown key {where}{key!r}")
        if isinstance(base[key], dict) and base[key] and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{where}{key}.")
        elif isinstance(base[key], dict) and base[key] and val is not None:
            raise ParseError(f"{where}{key} must be a mapping")
        else:
            out[key] = val
    return out


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``2e6`` and ``1.0e-8`` as floats."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                  |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                  |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                  |[-+]?\.(?:inf|Inf|INF)
                  |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def load_yaml(text: str):
    """YAML with exponent floats such as ``2e6`` read as numbers."""
    return yaml.load(text, Loader=_Loader)


def parse_scenario_text(text: str) -> dict:
    """Parse YAML text into a complete, validated settings dictionary."""
    try:
        raw = load_yaml(text) or {}
    except yaml.YAMLError as exc:
        raise ParseError(f"invalid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ParseError("scenario must be a mapping")
    cfg = _merge(DEFAULTS, raw)
    _validate(cfg)
    return cfg


def load_scenario(path=None) -> dict:
    """Read a scenario file; ``None`` reads the bundled default."""
    if path is None:
        text = resources.files("sdae_nmpc").joinpath("data").joinpath(DEFAULT_SCENARIO).read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ParseError(f"cannot read scenario {path}: {exc}") from None
    return parse_scenario_text(text)


def dump_scenario(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)


def _schedule(rows, name):
    try:
        arr = np.asarray(rows, dtype=float)
    except (TypeError, ValueError):
        raise ParseError(f"{name} must be a list of [time, value] pairs") from None
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) == 0:
        raise ParseError(f"{name} must be a non-empty list of [time, value] pairs")
    if np.any(np.diff(arr[:, 0]) <= 0):
        raise ParseError(f"{name} breakpoints must be strictly increasing in time")
    return arr


def _validate(cfg: dict):
    if cfg["model"] != "electrolyzer":
        raise ParseError(f"unknown model {cfg['model']!r}")
    if str(cfg["integrator"]["method"]).upper() not in METHODS:
        raise ParseError(f"unknown integrator method {cfg['integrator']['method']!r}")
    for key in ("total_steps",):
        if not isinstance(cfg[key], int) or cfg[key] < 1:
            raise ParseError(f"{key} must be a positive integer")
    if not float(cfg["integrator"]["newton_tol"]) > 0:
        raise ParseError("integrator.newton_tol must be positive")
    if not isinstance(cfg["integrator"]["steps_per_interval"], int) or \
            cfg["integrator"]["steps_per_interval"] < 1:
        raise ParseError("integrator.steps_per_interval must be a positive integer")
    if not isinstance(cfg["plant"]["steps_per_interval"], int) or \
            cfg["plant"]["steps_per_interval"] < 1:
        raise ParseError("plant.steps_per_interval must be a positive integer")
    if not float(cfg["sampling_time"]) > 0:
        raise ParseError("sampling_time must be positive")
    o = cfg["ocp"]
    if not isinstance(o["N"], int) or o["N"] < 1:
        raise ParseError("ocp.N must be a positive integer")
    if o["horizon"] is not None and abs(o["horizon"] - o["N"] * cfg["sampling_time"]) > 1e-9:
        raise ParseError("ocp.horizon must equal N * sampling_time")
    if float(o["u_min"]) > float(o["u_max"]):
        raise ParseError("ocp.u_min exceeds ocp.u_max")
    if cfg["measurement"]["R"] <= 0 or cfg["measurement"]["noise"] < 0:
        raise ParseError("measurement.R must be positive and measurement.noise non-negative")
    if cfg["plant"]["sigma"] < 0:
        raise ParseError("plant.sigma must be non-negative")
    _schedule(cfg["setpoint"], "setpoint")
    for key in ("T_amb", "P_in"):
        _schedule(cfg["disturbance"][key], f"disturbance.{key}")
    init = cfg["initial_input"]
    if init != "steady" and not isinstance(init, (int, float)):
        raise ParseError("initial_input must be 'steady' or a number")


def sample_schedule(rows, times_min):
    """Zero-order-hold lookup of ``(time, value)`` breakpoints."""
    arr = _schedule(rows, "schedule")
    idx = np.searchsorted(arr[:, 0], np.asarray(times_min, dtype=float), side="right") - 1
    return arr[np.clip(idx, 0, None), 1]


def build_scenario(cfg: dict, seed=None) -> Scenario:
    """Instantiate the runtime :class:`Scenario` (converting minutes to seconds)."""
    from .electrolyzer import electrolyzer_model, load_params, steady_state

    params = load_params(cfg["parameters"])
    sigma = float(cfg["plant"]["sigma"])
    model = electrolyzer_model(params, sigma=sigma)
    Ts_min = float(cfg["sampling_time"])
    T_s = Ts_min * MINUTE
    o = cfg["ocp"]
    method = str(cfg["integrator"]["method"]).upper()
    steps = int(cfg["integrator"]["steps_per_interval"])
    # shooting tolerance; the SQP merit must resolve changes well below the defaults
    tol = float(cfg["integrator"]["newton_tol"])
    ocp = OcpConfig(N=o["N"], T_s=T_s, u_min=[o["u_min"]], u_max=[o["u_max"]],
                    Q_z=[[o["Q_z"]]], Q_du=[[o["Q_du"]]], eta=float(o["eta"]),
                    method=method, steps=steps, newton=NewtonSettings(abs_tol=tol, rel_tol=tol))
    K = cfg["total_steps"]
    n_int = K + ocp.N
    t_int = Ts_min * np.arange(n_int)
    dist = np.column_stack([sample_schedule(cfg["disturbance"]["T_amb"], t_int),
                            sample_schedule(cfg["disturbance"]["P_in"], t_int)])
    setpoint = sample_schedule(cfg["setpoint"], Ts_min * np.arange(n_int + 1))[:, None]
    x0 = np.asarray(cfg["initial_state"]["x"], dtype=float)
    if cfg["initial_input"] == "steady":
        u_prev = steady_state(params, x0[0], x0[1], dist[0, 0], dist[0, 1])["u"]
    else:
        u_prev = np.array([float(cfg["initial_input"])])
    ss = steady_state(params, x0[0], x0[1], dist[0, 0], dist[0, 1])
    y0 = solve_consistent_algebraic(model, 0.0, x0, u_prev, dist[0], ss["y"])
    f = cfg["filter"]
    P0 = np.asarray(f["P0"], dtype=float)
    P0 = np.diag(P0) if P0.ndim == 1 else P0
    return Scenario(
        model=model, x0=x0, y0=y0, u_prev=u_prev, x_hat0=np.asarray(f["x0"], dtype=float),
        P0=P0, R=[[cfg["measurement"]["R"]]], ocp=ocp, total_steps=K,
        disturbance=dist, setpoint=setpoint,
        plant=SimConfig(steps=int(cfg["plant"]["steps_per_interval"])),
        seed=int(cfg["seed"] if seed is None else seed),
        measurement_cov=[[cfg["measurement"]["noise"]]],
        prediction=PredictionConfig(method, steps),
        sqp=SqpSettings(max_iterations=int(cfg["sqp"]["max_iterations"]),
                        kkt_tol=float(cfg["sqp"]["kkt_tol"])))
