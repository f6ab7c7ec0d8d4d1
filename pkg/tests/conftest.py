import re

_CRITERIA = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    failed = report.failed
    if report.when == "call" or failed:
        prev = _CRITERIA.get(n, ("PASS", ""))
        new = dict(report.user_properties).get("detail", "")
        detail = "; ".join(x for x in (prev[1], new) if x)
        _CRITERIA[n] = ("FAIL" if failed or prev[0] == "FAIL" else "PASS", detail)
    elif report.skipped:
        _CRITERIA[n] = ("SKIP", "")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}".rstrip())
