import sys
from pathlib import Path

# tests import the shared oracles as a plain module
sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, _, line in sorted(acceptance_log.RESULTS):
        terminalreporter.write_line(line)
