import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))  # for the shared oracles module

ACCEPTANCE_LINES: dict = {}


def report(criterion: int, passed, detail: str) -> None:
    """Record one acceptance line; ``passed`` may be True, False or a label such as "XFAIL"."""
    status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
    line = f"criterion {criterion:2d}: {status} - {detail}"
    ACCEPTANCE_LINES[criterion] = ACCEPTANCE_LINES.get(criterion, []) + [line]
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        for line in ACCEPTANCE_LINES[key]:
            terminalreporter.write_line(line)
