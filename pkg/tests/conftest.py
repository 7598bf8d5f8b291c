import numpy as np
import pytest

from mbseq.config import RunConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_config(**changes) -> RunConfig:
    """J=8, d=4 model small enough for finite-difference checks."""
    base = dict(J=8, d=4, L=1, heads=2, C=2, p1=2, p2=4, k=3, w0=0.1, q1=1, q2=1, dropout=0.0, hyper_layers=2)
    base.update(changes)
    return RunConfig(**base).validate()


def toy_batch(J: int = 8, n_items: int = 10, n_behaviors: int = 4, size: int = 2, seed: int = 0):
    """Front-padded sequences with repeats and two masked positions per row."""
    from mbseq.data import Batch

    rng = np.random.default_rng(seed)
    items = rng.integers(1, n_items + 1, size=(size, J))
    behaviors = rng.integers(1, n_behaviors + 1, size=(size, J))
    items[:, 0] = behaviors[:, 0] = 0
    items[:, 3] = items[:, 1]
    labels = np.zeros_like(items)
    for pos in (2, J - 1):
        labels[:, pos] = items[:, pos]
        items[:, pos] = n_items + 1
        behaviors[:, pos] = n_behaviors + 1
    return Batch(np.arange(size), items, behaviors, labels)


def planted_config(**changes) -> RunConfig:
    """Settings for the view -> favorite -> buy chain corpus.

    q2=1 keeps the next chain's first view out of the masked buy's pooling window.
    """
    base = dict(J=20, d=32, L=2, heads=2, C=4, p1=4, p2=10, k=8, q1=2, q2=1, lr=0.03,
                batch_size=8, dropout=0.2, epochs=30, seed=0)
    base.update(changes)
    return RunConfig(**base).validate()
