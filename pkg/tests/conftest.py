import numpy as np
import pytest

from gatedlexnet.numerics import set_precision


@pytest.fixture(autouse=True)
def float64():
    set_precision("float64")
    yield
    set_precision("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_probs(rng, T, C, peak=1.0):
    """Row-stochastic ``[T, C]`` matrix; larger ``peak`` gives sharper rows."""
    logits = peak * rng.standard_normal((T, C))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
