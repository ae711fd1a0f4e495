import contextlib
import time

import pytest

_KEY_STASH = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(_KEY_STASH, [])

    @contextlib.contextmanager
    def record(number, title):
        notes = []
        start = time.perf_counter()
        try:
            yield notes
        except BaseException:
            _emit(lines, "FAIL", number, title, notes, start)
            raise
        _emit(lines, "PASS", number, title, notes, start)

    return record


def _emit(lines, verdict, number, title, notes, start):
    extra = f" ({'; '.join(notes)})" if notes else ""
    line = f"{verdict} criterion {number}: {title}{extra} [{time.perf_counter() - start:.1f}s]"
    lines.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_KEY_STASH, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
