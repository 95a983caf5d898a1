"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

import pytest

_outcomes: dict = {}  # criterion -> list of (passed, test name, detail)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if not rep.passed and not detail:
            detail = getattr(rep, "wasxfail", "") or (rep.longreprtext.strip().splitlines() or [""])[-1]
        # an expected failure is still a failure of the criterion
        _outcomes.setdefault(mark.args[0], []).append((rep.outcome == "passed", item.name, detail))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        rows = _outcomes[n]
        ok = all(r[0] for r in rows)
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}")
        for passed, name, detail in rows:
            terminalreporter.write_line(f"    {'pass' if passed else 'fail'}  {name}  {detail}".rstrip())
