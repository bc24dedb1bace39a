import numpy as np
import pytest

from ocds.model import BigramModel, Dataset, DownstreamLoss, QuadraticModel


def quad_data(xs, role="proxy"):
    return Dataset.from_payloads([np.atleast_1d(np.asarray(x, dtype=float)) for x in xs], role=role)


def random_sequences(rng, n, vocab, lo=2, hi=7):
    return [rng.integers(0, vocab, size=rng.integers(lo, hi)) for _ in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def quad():
    return QuadraticModel(1)


@pytest.fixture
def bigram_setup():
    """Small bigram problem: 8 proxy sequences, 4 downstream, vocab 4."""
    r = np.random.default_rng(7)
    V = 4
    model = BigramModel(V)
    proxy = Dataset.from_payloads(random_sequences(r, 8, V), role="proxy")
    down = Dataset.from_payloads(random_sequences(r, 4, V), role="downstream")
    theta0 = 0.1 * r.standard_normal(model.n_params)
    return model, proxy, DownstreamLoss(down), theta0


# Acceptance summary: one line per criterion, printed at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
