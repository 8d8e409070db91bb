"""Test-only switches that deliberately break selected computations.

Used by the verification suite to prove its checks are not vacuous.
Never enable these outside tests.
"""

from contextlib import contextmanager

ACTIVE: set[str] = set()

DENOMINATOR_OFF_BY_ONE = "denominator_off_by_one"
GAUSSIAN_NO_TRUNCATION = "gaussian_no_truncation"


@contextmanager
def enabled(name: str):
    ACTIVE.add(name)
    try:
        yield
    finally:
        ACTIVE.discard(name)
