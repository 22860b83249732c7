import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def region_input(values):
    """A 1x1xkxk tensor whose single 2x2 (or kxk) window is ``values`` in row-major order."""
    v = np.asarray(values, dtype=np.float64)
    k = int(round(len(v) ** 0.5))
    return v.reshape(1, 1, k, k)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config._acceptance_lines = {}


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL (or WARN for soft checks) line per acceptance criterion."""
    lines = request.config._acceptance_lines

    def record(number, title, ok, detail, soft=False):
        status = "PASS" if ok else ("WARN" if soft else "FAIL")
        lines[number] = f"{status}  criterion {number}: {title} | {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
