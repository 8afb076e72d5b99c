import numpy as np
import pytest

from dltta.model import build_model, train_source
from dltta.stream import SourceSpec, make_source


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def source_model():
    """Small model trained on the default source clusters."""
    spec = SourceSpec.default(n_samples=1000, seed=1)
    model = build_model(seed=0)
    return train_source(model, make_source(spec), 5, 0.5, 0, optimizer="momentum", momentum=0.0)


def random_distributions(rng, n, c):
    p = rng.random((n, c)) + 1e-3
    return p / p.sum(axis=1, keepdims=True)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
