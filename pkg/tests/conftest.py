import sys

import numpy as np
import pytest

from neural_reserve import kernels
from neural_reserve.tokenizer import byte_level_vocab

from helpers import OTHER_WORDS, synthetic_corpus, train_tiny


@pytest.fixture(scope="session")
def trained_tiny():
    """A tiny model trained once per session, plus held-out evaluation sequences."""
    model, train, losses = train_tiny(seed=0, steps=600)
    vocab = byte_level_vocab()
    held_out = [vocab.encode(s) for s in synthetic_corpus(99, 30)]
    return {"model": model, "train": train, "test": held_out, "losses": losses}


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    previous = kernels.backend_name()
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_other():
    """A second tiny model trained on a disjoint vocabulary of words."""
    model, train, losses = train_tiny(seed=1, steps=400, words=OTHER_WORDS)
    return {"model": model, "train": train, "losses": losses}


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.TITLES):
        status, detail = module.RESULTS.get(n, ("NOT RUN", ""))
        line = f"criterion {n:>2} {module.TITLES[n]}: {status}"
        terminalreporter.write_line(f"{line} - {detail}" if detail else line)
