import numpy as np
import pytest

from sdae_nmpc.electrolyzer import electrolyzer_model, load_params, steady_state


@pytest.fixture(scope="session")
def params():
    return load_params()


@pytest.fixture(scope="session")
def electrolyzer(params):
    return electrolyzer_model(params, sigma=0.03)


@pytest.fixture(scope="session")
def operating_point(params):
    """Steady state at 70 degC, inlet 30 degC, 25 degC ambient, 2 MW."""
    ss = steady_state(params, 70.0, 30.0, 25.0, 2.0e6)
    return {"x": ss["x"], "y": ss["y"], "u": ss["u"], "d": np.array([25.0, 2.0e6])}


def rel_err(a, b):
    """Entrywise |a - b| / max(1, |b|)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)), initial=0.0)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record sub-results of a numbered acceptance criterion.

    ``acceptance(n, label, ok, detail)`` stores the outcome; the terminal
    summary prints one PASS/FAIL line per criterion.
    """
    store = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number: int, label: str, ok: bool, detail: str):
        store.setdefault(number, []).append((label, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(ACCEPTANCE_KEY, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        parts = store[number]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{label}: {'ok' if good else 'FAIL'} ({text})"
                           for label, good, text in parts)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
