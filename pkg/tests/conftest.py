import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def central_difference(f, x: np.ndarray, coords, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` along the given coordinates."""
    out = np.empty(len(coords))
    for k, i in enumerate(coords):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[k] = (f(xp) - f(xm)) / (2 * h)
    return out


def max_relative_error(analytic, numeric, floor: float = 1e-4) -> float:
    """max_i |a_i - n_i| / max(|n_i|, floor)."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
