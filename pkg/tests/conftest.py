from collections import OrderedDict

import pytest

# criterion number -> (title, [(part, ok, detail)])
CRITERIA = OrderedDict()


@pytest.fixture
def criterion():
    """Record one checked part of a numbered acceptance criterion."""

    def record(number, title, part, ok, detail):
        CRITERIA.setdefault(number, (title, []))[1].append((part, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, parts = CRITERIA[number]
        ok = all(p[1] for p in parts)
        tr.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}")
        for part, p_ok, detail in parts:
            tr.write_line(f"    {'ok  ' if p_ok else 'FAIL'} {part}: {detail}")
