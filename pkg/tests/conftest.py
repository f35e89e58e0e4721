import numpy as np
import pytest

from tppkit import Dataset, Event, EventSequence, ModelConfig, build_model, make_batches


def small_config(**overrides) -> ModelConfig:
    base = dict(dim=8, ffn_dim=16, key_dim=4, value_dim=4, heads=2, rnn_dim=8,
                max_iters=2, dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base).validate()


def random_sequence(rng: np.random.Generator, length: int, num_types: int,
                    start: float = 0.3) -> EventSequence:
    gaps = rng.uniform(0.2, 1.5, size=length)
    times = start + np.cumsum(gaps)
    types = rng.integers(1, num_types + 1, size=length)
    return EventSequence([Event(float(t), int(c)) for t, c in zip(times, types)])


def random_dataset(rng: np.random.Generator, n: int, num_types: int,
                   min_len: int = 3, max_len: int = 8) -> Dataset:
    seqs = [random_sequence(rng, int(rng.integers(min_len, max_len + 1)), num_types)
            for _ in range(n)]
    return Dataset(seqs, num_types)


def single_batch(dataset: Dataset):
    return make_batches(dataset, len(dataset))[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    cfg = small_config()
    return build_model(cfg, 3, seed=7)
