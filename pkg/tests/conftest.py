import pytest

from promptcount import tensor as T


@pytest.fixture(autouse=True)
def fresh_tape():
    """Each test gets an empty tape with NaN poisoning checks on."""
    T.reset_tape()
    T.enable_debug_checks(True)
    yield
    T.enable_debug_checks(False)
    T.reset_tape()
