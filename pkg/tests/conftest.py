import sys
from pathlib import Path

# let test modules import the shared helpers next to them (gradcheck.py)
sys.path.insert(0, str(Path(__file__).parent))

CRITERIA: list = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
