import dataclasses

import numpy as np
import pytest

from ldelab.svpipe import CorpusConfig, ExperimentConfig, TrainConfig, build_corpus, train_sv


@pytest.fixture(scope="session")
def small_corpus():
    """6 train, 2 dev, 2 test speakers with short utterances."""
    cfg = CorpusConfig(n_train=6, n_dev=2, n_test=2, utts_per_speaker=8, adapt_utts=3,
                       min_dur_s=3.0, max_dur_s=5.0, tts_sentences=4, tts_tokens=20, seed=3)
    return build_corpus(cfg)


@pytest.fixture(scope="session")
def small_experiment():
    return ExperimentConfig(seed=5, train=TrainConfig(steps=20, batch_size=8, plateau_window=50))


@pytest.fixture(scope="session")
def small_model(small_corpus, small_experiment):
    return train_sv(small_experiment, small_corpus)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def replace(obj, **kw):
    return dataclasses.replace(obj, **kw)


# one line per acceptance criterion, repeated in the terminal summary so it survives output capture
ACCEPTANCE_LOG: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LOG:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LOG:
            terminalreporter.write_line(line)
