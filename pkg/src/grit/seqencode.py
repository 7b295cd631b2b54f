"""Item + positional embeddings, normalised and dropped out, with pads zeroed."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .config import ModelConfig
from .dataio import SequenceBatch


def sinusoid_table(L: int, d: int) -> np.ndarray:
    if d % 2:
        raise ValueError(f"sinusoidal encoding needs an even dimension, got d={d}")
    pos = np.arange(L, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    out = np.empty((L, d))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq)
    return out


@dataclass
class EmbeddingTables:
    item: dc.Tensor  # (m+1) x d, row 0 is the pad
    pos: dc.Tensor  # L x d
    ln_gain: dc.Tensor
    ln_bias: dc.Tensor
    mode: str

    def named(self) -> dict[str, dc.Tensor]:
        return {"item_emb": self.item, "pos_emb": self.pos,
                "emb_ln.gain": self.ln_gain, "emb_ln.bias": self.ln_bias}


def init_tables(config: ModelConfig, rng: np.random.Generator | int) -> EmbeddingTables:
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    dt = np.dtype(config.dtype)
    d, L = config.d, config.max_len
    item = dc.truncated_normal(rng, (config.n_items + 1, d), 0.02, dt)
    item[0] = 0.0
    if config.pos_mode == "fully_learnable":
        pos = dc.Tensor(dc.truncated_normal(rng, (L, d), 0.02, dt), requires_grad=True)
    else:
        pos = dc.Tensor(sinusoid_table(L, d).astype(dt),
                        requires_grad=config.pos_mode == "learnable_sinusoidal_init")
    return EmbeddingTables(
        item=dc.Tensor(item, requires_grad=True),
        pos=pos,
        ln_gain=dc.Tensor(np.ones(d, dt), requires_grad=True),
        ln_bias=dc.Tensor(np.zeros(d, dt), requires_grad=True),
        mode=config.pos_mode,
    )


def encode_sequence(
    batch: SequenceBatch,
    tables: EmbeddingTables,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
    ln_eps: float = 1e-12,
) -> dc.Tensor:
    ids = np.asarray(batch.item_ids)
    n_rows = tables.item.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"item id out of range [0, {n_rows})")
    L = ids.shape[1]
    if L != tables.pos.shape[0]:
        raise ValueError(f"rows have length {L} but the positional table has {tables.pos.shape[0]}")
    x = dc.embedding(tables.item, ids) + tables.pos
    x = dc.layer_norm(x, tables.ln_gain, tables.ln_bias, ln_eps)
    x = dc.dropout(x, dropout, rng, training)
    mask = np.asarray(batch.attention_mask, dtype=x.dtype)[..., None]
    return x * mask
