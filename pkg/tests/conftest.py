import numpy as np
import pytest

from mtdsi import toy
from mtdsi.audio import AudioBuffer


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_speech():
    """About 20 s of synthetic speech from several speakers."""
    return toy.concatenate(toy.make_corpus(10, seed=123, duration=2.0))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_posteriors(rng, n_frames, n_classes, concentration=1.0):
    return rng.dirichlet(np.full(n_classes, concentration), size=n_frames)


def tone(freq, duration=1.0, amp=1.0, sample_rate=16000):
    t = np.arange(int(duration * sample_rate)) / sample_rate
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t), sample_rate)


@pytest.fixture(scope="session")
def toy_system(toy_speech):
    """Small multi-condition frame classifier plus an SSN masker and held-out utterances."""
    from mtdsi import maskers, pipeline

    ssn = maskers.make_masker(maskers.MaskerSpec("SSN"), toy_speech, 20.0, seed=1)
    train = toy.make_corpus(30, seed=7, prefix="train")
    model = pipeline.train_multicondition(train, {"ssn": ssn}, seed=0)
    held_out = toy.make_corpus(12, seed=8, prefix="test", n_speakers=2)
    return {"model": model, "masker": ssn, "utts": held_out}


@pytest.fixture(scope="session")
def toy_experiment(tmp_path_factory):
    """Synthetic experiment on disk (2 maskers, 20 SNRs, 4 sentences per SNR)."""
    from mtdsi import pipeline

    return pipeline.setup_toy_experiment(tmp_path_factory.mktemp("toy"), seed=0)
