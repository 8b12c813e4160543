import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def intrinsics():
    from evstar.sim import DEFAULT_INTRINSICS

    return DEFAULT_INTRINSICS


@pytest.fixture(scope="session")
def small_case():
    """A light 100 ms suite chunk (200 Hz per star) for fast end-to-end checks."""
    from evstar.suite import SuiteConfig, suite_case

    return suite_case(3, 100_000, SuiteConfig(rate_hz=200.0))


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request, capsys):
    """``criterion(n, ok, detail)`` prints and records one acceptance line."""

    def emit(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash.setdefault(_ACCEPTANCE, []).append((n, line))
        with capsys.disabled():
            print(f"\n{line}")

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
