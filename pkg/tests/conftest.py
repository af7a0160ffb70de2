import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def verdict(request):
    """Record one acceptance line: ``verdict(number, title, ok, detail)``.

    A test that stops before recording is reported as failed.
    """
    store = request.config.stash.setdefault(VERDICTS, {})
    seen = []

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        seen.append(number)
        store[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}" + (f" ({detail})" if detail else "")
        print(store[number])
        return ok

    yield record
    if not seen:
        store[request.node.name] = f"[FAIL] {request.node.name}: did not complete"


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(VERDICTS, {})
    if not store:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(store, key=lambda k: (isinstance(k, str), k if isinstance(k, int) else 0, str(k))):
        terminalreporter.write_line(store[key])
