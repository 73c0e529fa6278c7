import sys

import pytest


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance verdicts, one line per criterion, in order."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
    extra = getattr(mod, "SUPPLEMENTARY", None)
    if extra:
        terminalreporter.section("supplementary directional checks")
        for line in extra.values():
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    import numpy as np
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus():
    from spul.data import make_corpus
    return make_corpus(240, 80, seed=3)


@pytest.fixture(scope="session")
def tiny_split(tiny_corpus):
    from spul.data import partition_by_entities
    return partition_by_entities(*tiny_corpus, ["aldren", "brisco"])


@pytest.fixture(scope="session")
def tiny_model(tiny_corpus):
    """A small frozen model, lightly trained so its predictions are not constant."""
    from spul.lm import ModelConfig, train_base
    model, _ = train_base(tiny_corpus[0], config=ModelConfig(d=16, n_layers=2, n_heads=2, context=64),
                          epochs=6, lr=5e-3, seed=0)
    return model.freeze()
