import numpy as np
import pytest

from adadiff.config import RunConfig
from adadiff.corpus import corpus_from_config, split


def tiny_config(**overrides) -> RunConfig:
    """Small enough to train for a few steps in well under a second."""
    base = dict(n_train_speakers=4, utts_per_speaker=4, n_heldout_speakers=2, n_adapt_utts=2, n_test_utts=2,
                T=20, n_blocks=2, channels=8, step_sin_dim=8, step_hidden_dim=16, enc_dim=8, ff_dim=16,
                speaker_dim=12, step_cln_dim=12, enc_layers=1, stage1_steps=4, stage2_steps=2,
                batch_frames=64, adapt_steps=3, probe_steps=200, compare_seeds=2, seed_batches=2, grid_seeds=3)
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_corpus():
    cfg = tiny_config()
    return cfg, corpus_from_config(cfg)


@pytest.fixture(scope="session")
def default_corpus():
    cfg = RunConfig()
    c = corpus_from_config(cfg)
    return cfg, c, split(c)


@pytest.fixture(scope="session")
def default_probe(default_corpus):
    from adadiff.evaluation import train_probe
    cfg, corpus, _ = default_corpus
    return train_probe(corpus, cfg, seed=0)
