import numpy as np
import pytest

from attncal.model import Model, ModelConfig
from attncal.tasks import TaskSpec


def tiny_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=24, n_layers=2, n_heads=2, d_model=8, d_head=4, max_seq=32)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model() -> Model:
    return Model.init(tiny_config(), seed=3)


@pytest.fixture
def kv_task() -> TaskSpec:
    return TaskSpec(kind="kv", num_segments=5, vocab_size=24)


@pytest.fixture
def rng() -> np.random.Generator:
    # test-side randomness only; the library uses its own Rng
    return np.random.default_rng(1234)


# acceptance reporting ----------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[dict]()


class _Criterion:
    def __init__(self, store: dict, number: int, title: str):
        self.store, self.number, self.title = store, number, title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.details)
        if exc_type is not None:
            detail = (detail + "; " if detail else "") + f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        self.store[self.number] = f"criterion {self.number} [{status}] {self.title}" + (f" ({detail})" if detail else "")
        return False


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as c:`` records one PASS/FAIL line for the terminal summary."""
    store = request.config.stash.setdefault(_ACCEPTANCE, {})
    return lambda number, title: _Criterion(store, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for number in sorted(store):
            terminalreporter.write_line(store[number])
