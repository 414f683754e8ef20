import asyncio

import pytest


def run(coro, timeout: float = 60.0):
    """Run ``coro`` on a fresh event loop with an overall timeout."""
    return asyncio.run(asyncio.wait_for(coro, timeout))


@pytest.fixture
def arun():
    return run


# -- acceptance reporting -------------------------------------------------------
# Tests marked ``@pytest.mark.acceptance("<id>", "<title>")`` get one
# PASS/FAIL line each in the terminal summary; ``record`` attaches detail.

_RESULTS: list[tuple[str, str, str, str]] = []


@pytest.fixture
def record(request):
    def _record(key: str, value) -> None:
        request.node.user_properties.append((key, value))
        print(f"{key}: {value}")
    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        verdict = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        title = marker.args[1] if len(marker.args) > 1 else ""
        _RESULTS.append((str(marker.args[0]), title, verdict, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid, title, verdict, detail in sorted(_RESULTS, key=lambda r: r[0]):
        line = f"criterion {cid:<3} {verdict:<4} {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
