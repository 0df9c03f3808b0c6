import contextlib
import time

import pytest

_RESULTS = {}


@pytest.fixture
def criterion():
    """``with criterion(n, title) as note:`` records PASS/FAIL for the summary.

    Call ``note("...")`` to attach measured values to the report line.
    """

    @contextlib.contextmanager
    def track(number, title):
        details = []
        start = time.perf_counter()
        try:
            yield details.append
        except BaseException:
            _RESULTS[number] = ("FAIL", title, details, time.perf_counter() - start)
            raise
        _RESULTS[number] = ("PASS", title, details, time.perf_counter() - start)

    return track


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, title, details, secs = _RESULTS[n]
        extra = "; ".join(details)
        terminalreporter.write_line(f"criterion {n}: {status}  {title} ({secs:.1f}s)"
                                    + (f"  [{extra}]" if extra else ""))
