import numpy as np
import pytest
import torch

from vldet.config import ModelConfig
from vldet.synthdata import build_vocabulary, generate_dataset, load_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def cfg():
    return ModelConfig()


@pytest.fixture(scope="session")
def vocab():
    return build_vocabulary(4, 4, 4, seed=0)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory, vocab):
    """16 train / 6 eval scenes at the default 64x64 size."""
    root = tmp_path_factory.mktemp("small_data")
    generate_dataset(vocab, 16, "train", 0, root)
    generate_dataset(vocab, 6, "eval", 0, root)
    return root


@pytest.fixture(scope="session")
def small_train(small_data):
    return load_dataset(small_data, "train")


@pytest.fixture(scope="session")
def small_eval(small_data):
    return load_dataset(small_data, "eval")


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.manual_seed(0)
    yield


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
