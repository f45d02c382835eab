import numpy as np
import pytest

from parainject import datagen, encoder as enc
from parainject.tokenizer import Tokenizer, build_vocab


@pytest.fixture(scope="session")
def small_corpus():
    cfg = datagen.SynthConfig(size=120, seed=3)
    records, _ = datagen.generate_synthetic(cfg)
    return records


@pytest.fixture(scope="session")
def tokenizer(small_corpus):
    vocab = build_vocab((r.source + r.target for r in small_corpus), 300)
    return Tokenizer(vocab)


@pytest.fixture(scope="session")
def tiny_config(tokenizer):
    return enc.EncoderConfig(layers=2, hidden=16, heads=2, ff=32, max_len=48,
                             vocab_size=len(tokenizer.vocab), dropout=0.1)


@pytest.fixture(scope="session")
def tiny_params(tiny_config):
    return enc.init_params(tiny_config, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
