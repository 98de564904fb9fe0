import numpy as np
import pytest
import torch

import refdemorph as rdm


@pytest.fixture(scope="session")
def backends():
    return rdm.build_toy_backends()


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory, backends):
    """A small generated corpus shared by the data-dependent tests."""
    root = tmp_path_factory.mktemp("toy_corpus")
    cfg = rdm.CorpusConfig(n_identities=14, random_pairs=1, lookalike_pairs=1,
                           seed=21)
    rdm.build_corpus(backends, cfg, root)
    return root


@pytest.fixture(scope="session")
def corpus(corpus_dir):
    return rdm.CorpusData(corpus_dir)


def rand_image(rng: np.random.Generator, size: int = 16,
               scale: float = 0.5) -> torch.Tensor:
    """Random in-range image for tests that only need plausible pixels."""
    x = rng.uniform(-scale, scale, size=(3, size, size))
    return torch.tensor(x, dtype=rdm.DTYPE)
