import numpy as np
import pytest
from hypothesis import settings

from kinform.autograd.tensor import set_default_dtype
from kinform.data import SyntheticConfig, generate_synthetic

settings.register_profile("kinform", deadline=None, max_examples=40)
settings.load_profile("kinform")


@pytest.fixture(autouse=True)
def _float64():
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)


@pytest.fixture(scope="session")
def small_dataset():
    """30 families of 16-d embeddings, enough for every trained class."""
    return generate_synthetic(SyntheticConfig(n_families=30), seed=3)


@pytest.fixture(scope="session")
def tiny_families():
    return generate_synthetic(SyntheticConfig(n_families=10, images_per_member=(1, 2)), seed=11)


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; the lines are echoed in the summary."""

    def record(number, title, ok, detail=""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        _VERDICTS.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
