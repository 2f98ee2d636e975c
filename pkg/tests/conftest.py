import numpy as np
import pytest

CRITERION_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(n, name): acceptance criterion covered by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and report.when == "call":
        num, name = marker.args
        CRITERION_RESULTS[num] = (name, report.passed)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERION_RESULTS):
        name, passed = CRITERION_RESULTS[num]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {num:2d}: {name}")


@pytest.fixture
def rng_factory():
    from diffatlas.rng import Rng
    return Rng


@pytest.fixture
def default_schedule():
    from diffatlas.diffusion import make_schedule
    return make_schedule(100, 0.001, 0.2)


@pytest.fixture
def small_phantoms():
    from diffatlas.phantom import domain_a, gen_phantom
    return [gen_phantom(seed, domain_a()) for seed in range(4)]


def assert_all_finite(*arrays):
    for arr in arrays:
        assert np.all(np.isfinite(arr))
