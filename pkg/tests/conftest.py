import pytest

ACCEPTANCE_TITLES = {
    1: "layout enumeration and uniformity",
    2: "perimetry recovery",
    3: "saccade detector injection harness",
    4: "DVF analytic oracles",
    5: "TOST numeric oracle",
    6: "exclusion bookkeeping",
    7: "VF-radius monotonicity battery",
    8: "end-to-end determinism and runtime",
    9: "scoring contracts",
}

_acceptance: dict[int, bool] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    n = int(marker.args[0])
    if rep.when == "call":
        _acceptance[n] = _acceptance.get(n, True) and rep.passed
    elif rep.failed or rep.skipped:
        _acceptance[n] = False


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance):
        status = "PASS" if _acceptance[n] else "FAIL"
        terminalreporter.write_line(f"criterion {n} ({ACCEPTANCE_TITLES.get(n, '')}): {status}")
