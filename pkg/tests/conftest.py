import re

import pytest


class CriterionLog:
    def __init__(self):
        self.lines = {}

    def __call__(self, number: int, ok: bool, detail: str) -> bool:
        self.lines[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(self.lines[number])
        return ok


def pytest_configure(config):
    config._criteria = CriterionLog()
    config._criteria_selected = []


@pytest.fixture
def criterion(request):
    return request.config._criteria


def pytest_collection_finish(session):
    for item in session.items:
        m = re.match(r"test_criterion_(\d+)_", item.name)
        if m:
            session.config._criteria_selected.append(int(m.group(1)))


def pytest_terminal_summary(terminalreporter, config):
    if not config._criteria_selected:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(config._criteria_selected):
        terminalreporter.write_line(config._criteria.lines.get(n, f"criterion {n}: FAIL  (errored before a result)"))
