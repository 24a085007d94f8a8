import numpy as np
import pytest
import torch

from formssl.synthgen import SynthParams, generate_corpus


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Eight 64 px videos, half with knee_inward, written in the ingest formats."""
    out = tmp_path_factory.mktemp("corpus")
    manifest, videos, labels = generate_corpus(out, 8, SynthParams(image_size=64), seed=11)
    return out, videos, labels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[number])
