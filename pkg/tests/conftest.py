import pytest

from voltcast.data import SyntheticConfig, generate_synthetic


@pytest.fixture(scope="session")
def small_ds():
    """40 days, 8 instants, 3 variables, 4 stations."""
    return generate_synthetic(SyntheticConfig(t_days=40, h=8, v=3, i=4, noise_sigma=200.0, seed=3))


@pytest.fixture(scope="session")
def linear_ds():
    """Noise-free load that is an affine function of the aggregated temperature."""
    return generate_synthetic(SyntheticConfig(t_days=60, h=8, v=1, i=4, noise_sigma=0.0, response="linear"))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test checks")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    results = item.config._criteria
    key = str(marker.args[0])
    ok = report.passed
    detail = getattr(item, "criterion_detail", "")
    prev = results.get(key)
    if prev is not None:
        ok = ok and prev[0]
        detail = "; ".join(d for d in (prev[1], detail) if d)
    results[key] = (ok, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_criteria", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    order = sorted(results, key=lambda k: (int("".join(c for c in k if c.isdigit()) or 0), k))
    for key in order:
        ok, detail = results[key]
        line = f"criterion {key}: {'PASS' if ok else 'FAIL'}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
