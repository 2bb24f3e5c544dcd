import pytest

from reqaug.demo import make_desk_corpus, make_memorization_corpus
from reqaug.lexicon import build_reserved
from reqaug.lm.bbpe import train_bbpe
from reqaug.lm.mlm import LmConfig, train_mlm


@pytest.fixture(scope="session")
def desk50():
    return make_desk_corpus(50, seed=3)


@pytest.fixture(scope="session")
def tiny_bundle(desk50):
    """A small trained model shared by tests that just need real embeddings."""
    tokenizer = train_bbpe(desk50, 1024)
    config = LmConfig(layers=2, heads=4, hidden=64, vocab_size=1024,
                      epochs=10, batch_size=16, seed=5)
    model = train_mlm(tokenizer, desk50, config)
    _, reserved = build_reserved(desk50, 0.9999, z_override=5.73)
    return tokenizer, model, reserved


@pytest.fixture(scope="session")
def overfit_bundle():
    """A model memorizing ten requests; per-token NLLs are near zero."""
    corpus = make_memorization_corpus()
    tokenizer = train_bbpe(corpus, 1024)
    config = LmConfig(layers=2, heads=4, hidden=96, vocab_size=1024,
                      epochs=300, batch_size=10, learning_rate=3e-3, seed=5)
    model = train_mlm(tokenizer, corpus, config)
    return corpus, tokenizer, model
