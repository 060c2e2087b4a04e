import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(label): acceptance criterion label for reporting")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call":
        return
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        label = marker.args[0]
        verdict = "PASS" if report.passed else "FAIL"
        capman = item.config.pluginmanager.getplugin("capturemanager")
        if capman is not None:
            with capman.global_and_fixture_disabled():
                print(f"[ACCEPTANCE] {label}: {verdict}")
        else:
            print(f"[ACCEPTANCE] {label}: {verdict}")
