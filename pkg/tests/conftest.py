import numpy as np
import pytest

from signctx.corpus import GeneratorConfig, Tokenizer, synthesize
from signctx.model import ModelConfig, ModelInput, TranslationModel


def tiny_config(vocab_size=12, feature_dim=6, streams=("context", "video", "spotting"), **kw) -> ModelConfig:
    base = dict(d_model=8, d_ff=16, layers=1, heads=2, dropout=0.0, max_positions=16, seed=0)
    base.update(kw)
    return ModelConfig(vocab_size=vocab_size, feature_dim=feature_dim, enabled_streams=tuple(streams), **base)


def random_input(rng, cfg: ModelConfig, n_ctx=3, n_win=4, n_spot=2) -> ModelInput:
    inp = ModelInput()
    if "context" in cfg.enabled_streams:
        inp.context = rng.integers(5, cfg.vocab_size, size=n_ctx).tolist()
    if "video" in cfg.enabled_streams:
        inp.video = rng.normal(size=(n_win, cfg.feature_dim))
    if "spotting" in cfg.enabled_streams:
        inp.spotting = rng.integers(5, cfg.vocab_size, size=n_spot).tolist()
    return inp


@pytest.fixture
def tiny_model():
    return TranslationModel(tiny_config())


@pytest.fixture(scope="session")
def small_corpus():
    cfg = GeneratorConfig(train_episodes=4, dev_episodes=2, sentences_per_episode=3, feature_dim=8)
    splits, truth, lex = synthesize(cfg, seed=5)
    tok = Tokenizer.for_corpus(splits["train"] + splits["dev"])
    return splits, truth, lex, tok
