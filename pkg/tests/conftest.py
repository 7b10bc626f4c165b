import numpy as np
import pytest

from crashseq.dataio import FeatureSequence
from crashseq.model import ModelConfig


@pytest.fixture
def tiny_config():
    """Smallest config the gradient/logit tests run on."""
    return ModelConfig(input_dim=8, d_model=8, num_layers=1, num_heads=2,
                       max_len=32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_sequence(rng, T, D, clip_id="clip"):
    return FeatureSequence(clip_id=clip_id,
                           data=rng.normal(size=(T, D)).astype(np.float32))


@pytest.fixture
def make_seq(rng):
    def _make(T, D, clip_id="clip"):
        return make_sequence(rng, T, D, clip_id)
    return _make
