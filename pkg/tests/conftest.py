import numpy as np
import pytest

from thermnet.dataset import DEFAULT_FAMILIES, Condition, SynthConfig, generate_synthetic, load_corpus
from thermnet.model import build_study2_spec, init_parameters
from thermnet.training import TrainConfig, train


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """3 classes x 12 frames alternating conditions A and B."""
    root = tmp_path_factory.mktemp("corpus")
    cfg = SynthConfig(
        families=DEFAULT_FAMILIES[:3],
        frames_per_class=12,
        conditions=(Condition("A"), Condition("B", scale=1.4, noise_sd=0.1)),
        seed=3,
    )
    generate_synthetic(cfg, root)
    return root


@pytest.fixture(scope="session")
def small_dataset(small_corpus):
    return load_corpus(small_corpus)


@pytest.fixture(scope="session")
def small_model(small_dataset):
    """Study2 net at side 44 briefly trained on the small corpus."""
    spec = build_study2_spec(len(small_dataset.vocabulary), input_side=44)
    model = init_parameters(spec, 0, small_dataset.vocabulary)
    model, _ = train(model, small_dataset, TrainConfig(0.01, 8, 3, 0.9, 0))
    return model


# one line per acceptance criterion, repeated in the terminal summary so the
# verdicts survive pytest's output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
