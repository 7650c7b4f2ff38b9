import numpy as np
import pytest

from idsynth.avatargen import dataset_stream, split_pool
from idsynth.encoders import train_identity_encoder


@pytest.fixture(scope="session")
def id_encoder():
    """Identity encoder trained briefly on the default 16-identity pool."""
    samples = list(dataset_stream(0, 800, 16))
    enc, losses = train_identity_encoder(samples, 5, np.random.default_rng(0))
    return enc.freeze()


@pytest.fixture(scope="session")
def pools():
    return split_pool(0, 16, 4)


_ACCEPTANCE = pytest.StashKey[dict]()


class Criterion:
    """Context manager that records one acceptance line: PASS unless the block raises."""

    def __init__(self, table: dict, number: int, title: str):
        self.table, self.number, self.title = table, number, title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        if exc is not None and not self.details:
            self.details.append(str(exc).splitlines()[0] if str(exc) else exc_type.__name__)
        self.table[self.number] = f"criterion {self.number} {status}: {self.title} | {'; '.join(self.details)}"
        return False


@pytest.fixture
def criterion(request):
    table = request.config.stash.setdefault(_ACCEPTANCE, {})

    def make(number: int, title: str) -> Criterion:
        return Criterion(table, number, title)

    return make


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(_ACCEPTANCE, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(table):
        terminalreporter.write_line(table[n])
