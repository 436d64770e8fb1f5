from __future__ import annotations

import pytest

from partproto import autodiff


@pytest.fixture(autouse=True)
def finite_checks():
    """Fail fast on NaN/Inf coming out of any tensor op during unit tests.
    Heavy experiment fixtures switch this off themselves for speed."""
    prev = autodiff.set_debug_checks(True)
    yield
    autodiff.set_debug_checks(prev)
