import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# acceptance results collected by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split(".")[0].rstrip("ab")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line("criterion %-4s %s  %s" % (key, "PASS" if ok else "FAIL", detail))
