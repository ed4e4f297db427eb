"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

import contextlib

RESULTS = []


@contextlib.contextmanager
def criterion(number, title):
    try:
        yield
    except BaseException as exc:
        RESULTS.append(f"criterion {number} FAIL  {title}: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}")
        raise
    RESULTS.append(f"criterion {number} PASS  {title}")
