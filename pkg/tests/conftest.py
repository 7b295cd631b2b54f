import numpy as np
import pytest

from grit.config import ModelConfig
from grit.dataio import Dataset, leave_one_out_split


def cyclic_dataset(n_users=40, n_items=12, min_len=6, max_len=14, seed=0):
    """Each user walks the item cycle 1 -> 2 -> ... -> n_items -> 1 from a random start."""
    rng = np.random.default_rng(seed)
    seqs = []
    for _ in range(n_users):
        start = rng.integers(0, n_items)
        n = rng.integers(min_len, max_len + 1)
        seqs.append(((start + np.arange(n)) % n_items + 1).astype(np.int64))
    return Dataset([f"u{u}" for u in range(n_users)], ["<pad>"] + [f"i{i}" for i in range(1, n_items + 1)], seqs)


@pytest.fixture
def toy_split():
    return leave_one_out_split(cyclic_dataset())


@pytest.fixture
def toy_config():
    return ModelConfig(n_items=12, d=8, max_len=6, layers=2, heads=2, kappa=3, dropout=0.2,
                       attn_dropout=0.1, dtype="float64")
