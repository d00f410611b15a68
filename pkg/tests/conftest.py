"""Collects one status line per acceptance criterion and prints them at the end of the run."""

from contextlib import contextmanager

ACCEPTANCE_LINES: list[str] = []


@contextmanager
def criterion(number: int, title: str):
    """Record PASS/FAIL for one criterion; ``notes`` collects measured values for the line."""
    notes: dict = {}
    try:
        yield notes
    except BaseException:
        ACCEPTANCE_LINES.append(_line(number, title, False, notes))
        raise
    ACCEPTANCE_LINES.append(_line(number, title, True, notes))


def _line(number, title, ok, notes):
    detail = ", ".join(f"{k}={v}" for k, v in notes.items())
    return f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}" + (f" ({detail})" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("]")[1].split(".")[0])):
        terminalreporter.write_line(line)
