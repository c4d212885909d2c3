import os
import sys

import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from pooled_corr.datasets import builtin  # noqa: E402
from pooled_corr.schemas import StudySummary  # noqa: E402


@pytest.fixture
def molloy():
    return builtin("molloy2014")


@pytest.fixture
def santos():
    return builtin("santos2016")


@pytest.fixture
def chalkidou():
    return builtin("chalkidou2012")


@pytest.fixture
def three_studies():
    """Equal-size studies with z = atanh(r) spread symmetrically."""
    return [StudySummary(r=r, n=50) for r in (0.1, 0.3, 0.5)]
