import numpy as np
import pytest

from hslnet.config import ModelConfig
from hslnet.data import ObjectFeatureSet, TokenSequence
from hslnet.model import HSLModel

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_config(encoder="transformer", **overrides) -> ModelConfig:
    base = dict(levels=2, d0=6, d_c=8, d_e=8, word_dim=8, encoder=encoder, heads=2,
                image_layers=1, text_layers=1, vocab_size=10, lambdas=(0.5, 1.0))
    base.update(overrides)
    return ModelConfig(**base)


def random_batch(rng, N=4, n=3, m=5, d0=6, vocab=10, ragged=False):
    images, queries = [], []
    for i in range(N):
        count = int(rng.integers(1, n + 1)) if ragged else n
        length = int(rng.integers(1, m + 1)) if ragged else m
        images.append(ObjectFeatureSet(f"i{i}", rng.standard_normal((count, d0))))
        queries.append(TokenSequence(f"q{i}", rng.integers(2, vocab, size=length)))
    return images, queries


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["transformer", "bigru"])
def tiny_model(request):
    cfg = tiny_config(request.param)
    return HSLModel(cfg, np.random.default_rng(0))
