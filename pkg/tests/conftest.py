import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_config(**overrides):
    from probseq.model import ModelConfig

    values = dict(input_dim=6, hidden_dim=4, num_layers=1, num_heads=2, head_widths=(5,), init_seed=0)
    values.update(overrides)
    return ModelConfig(**values)


def padded_batch(rng, lengths, dim):
    """Random embeddings with NaN written into every padded slot."""
    lengths = list(lengths)
    X = rng.normal(size=(len(lengths), max(lengths), dim))
    mask = np.zeros(X.shape[:2], dtype=bool)
    for i, n in enumerate(lengths):
        mask[i, :n] = True
        X[i, n:] = np.nan
    return X, mask
