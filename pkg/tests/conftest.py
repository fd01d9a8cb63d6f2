import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# filled by test_acceptance; one (status, name, detail) entry per criterion
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{status} {name}: {detail}")
