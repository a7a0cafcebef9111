import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE: dict[str, dict] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_(a\d)_", report.nodeid)
    if not m:
        return
    key = m.group(1).upper()
    if report.when != "call" and not report.failed:
        return
    # parametrized criteria pass only if every case passes
    entry = _ACCEPTANCE.setdefault(key, {"verdicts": [], "details": []})
    entry["verdicts"].append("SKIP" if report.skipped else "PASS" if report.passed else "FAIL")
    entry["details"].extend(f"{k}={v}" for k, v in report.user_properties if f"{k}={v}" not in entry["details"])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k[1:])):
        entry = _ACCEPTANCE[key]
        verdicts = set(entry["verdicts"])
        verdict = "FAIL" if "FAIL" in verdicts else "SKIP" if verdicts == {"SKIP"} else "PASS"
        terminalreporter.write_line(f"{key} {verdict} {'; '.join(entry['details'])}".rstrip())
