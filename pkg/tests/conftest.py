import pytest
import torch

from mcrvqgan.config import tiny_config
from mcrvqgan.data import read_manifest, write_phantom_corpus


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Ten 32x32x180 phantom subjects on disk; returns the manifest path."""
    out = tmp_path_factory.mktemp("corpus")
    return write_phantom_corpus(10, seed=3, out_dir=out, size=32, depth=180)


@pytest.fixture(scope="session")
def corpus_rows(corpus):
    return read_manifest(corpus)


@pytest.fixture
def f64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)
