"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

_outcomes: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    number, title = crit
    entry = _outcomes.setdefault(number, {"title": title, "ok": True, "ran": False, "detail": []})
    if report.when == "call":
        entry["ran"] = True
        entry["detail"] += [v for k, v in report.user_properties if k == "detail"]
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False


def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        item.user_properties.append(("criterion", tuple(mark.args)))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        e = _outcomes[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        detail = f"  ({'; '.join(e['detail'])})" if e["detail"] else ""
        terminalreporter.write_line(f"criterion {number} {status}: {e['title']}{detail}")
