import contextlib
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (title, status, detail, seconds)
ACCEPTANCE: dict[int, tuple[str, str, str, float]] = {}


@contextlib.contextmanager
def _criterion(number: int, title: str):
    rec = {"detail": ""}
    t0 = time.perf_counter()
    try:
        yield rec
    except pytest.skip.Exception as exc:
        ACCEPTANCE[number] = (title, "SKIP", str(exc), time.perf_counter() - t0)
        raise
    except BaseException as exc:
        first = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        msg = rec["detail"] or first
        ACCEPTANCE[number] = (title, "FAIL", msg, time.perf_counter() - t0)
        raise
    else:
        ACCEPTANCE[number] = (title, "PASS", rec["detail"], time.perf_counter() - t0)


@pytest.fixture
def criterion():
    """``with criterion(n, title) as rec:`` records one acceptance line."""
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, status, detail, secs = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}  ({secs:.1f} s)  {detail}")
