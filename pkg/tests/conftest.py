import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        key = lambda s: int(s.split("criterion ")[1].split(":")[0])  # noqa: E731
        for line in sorted(acceptance_log.LINES, key=key):
            terminalreporter.write_line(line)
