import numpy as np
import pytest
import torch

from mdrg.datasets import SyntheticWorldConfig, generate_synthetic
from mdrg.tokenizer import train_vocab

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus():
    cfg = SyntheticWorldConfig(seed=7, n_dialogues=80, n_text_dialogues=120, n_pairs=96)
    return generate_synthetic(cfg)


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return train_vocab(small_corpus.text_lines(), 512)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
