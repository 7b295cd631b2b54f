"""Encoder blocks, the stacked model, scoring and checkpoint I/O."""
from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .config import ModelConfig
from .dataio import SequenceBatch
from .groupdyn import GroupBranchParams, group_branch, init_group_params
from .seqencode import EmbeddingTables, encode_sequence, init_tables

CHECKPOINT_MAGIC = b"GRITCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class BlockParams:
    wq: dc.Tensor
    bq: dc.Tensor
    wk: dc.Tensor
    bk: dc.Tensor
    wv: dc.Tensor
    bv: dc.Tensor
    wo: dc.Tensor
    bo: dc.Tensor
    attn_ln_gain: dc.Tensor
    attn_ln_bias: dc.Tensor
    group: GroupBranchParams
    w1: dc.Tensor
    b1: dc.Tensor
    w2: dc.Tensor
    b2: dc.Tensor
    out_ln_gain: dc.Tensor
    out_ln_bias: dc.Tensor

    def named(self, prefix: str) -> dict[str, dc.Tensor]:
        out = {}
        for k, v in self.__dict__.items():
            if k == "group":
                out.update(v.named(f"{prefix}group."))
            else:
                out[prefix + k] = v
        return out


def init_block(config: ModelConfig, rng: np.random.Generator) -> BlockParams:
    d, dff, dt = config.d, config.ffn_dim, np.dtype(config.dtype)

    def w(n_in, n_out):
        return dc.Tensor(dc.truncated_normal(rng, (n_in, n_out), 0.02, dt), requires_grad=True)

    def zeros(n):
        return dc.Tensor(np.zeros(n, dt), requires_grad=True)

    def ones(n):
        return dc.Tensor(np.ones(n, dt), requires_grad=True)

    return BlockParams(
        wq=w(d, d), bq=zeros(d), wk=w(d, d), bk=zeros(d), wv=w(d, d), bv=zeros(d),
        wo=w(d, d), bo=zeros(d), attn_ln_gain=ones(d), attn_ln_bias=zeros(d),
        group=init_group_params(config, rng),
        w1=w(d, dff), b1=zeros(dff), w2=w(dff, d), b2=zeros(d),
        out_ln_gain=ones(d), out_ln_bias=zeros(d),
    )


def attention_mask(mask: np.ndarray) -> np.ndarray:
    """(B, 1, L, L) allowed-key mask: causal, real keys only, diagonal always on.

    The diagonal keeps pad query rows well defined; real queries never see
    pad keys because pads precede every real position.
    """
    mask = np.asarray(mask, dtype=bool)
    L = mask.shape[-1]
    causal = np.tril(np.ones((L, L), dtype=bool))
    allowed = causal[None] & mask[:, None, :]
    allowed |= np.eye(L, dtype=bool)[None]
    return allowed[:, None]


def self_attention(x: dc.Tensor, mask: np.ndarray, p: BlockParams, config: ModelConfig,
                   training: bool = False, rng: np.random.Generator | None = None,
                   return_probs: bool = False):
    B, L, d = x.shape
    H = config.heads
    dh = d // H

    def heads(t):
        return dc.transpose(dc.reshape(t, (B, L, H, dh)), 1, 2)  # B H L dh

    q = heads(x @ p.wq + p.bq)
    k = heads(x @ p.wk + p.bk)
    v = heads(x @ p.wv + p.bv)
    scores = (q @ dc.transpose(k)) * (1.0 / math.sqrt(dh))
    probs = dc.softmax(scores, attention_mask(mask))
    attn = dc.dropout(probs, config.attn_dropout, rng, training)
    ctx = dc.reshape(dc.transpose(attn @ v, 1, 2), (B, L, d))
    out = dc.dropout(ctx @ p.wo + p.bo, config.dropout, rng, training)
    e = dc.layer_norm(x + out, p.attn_ln_gain, p.attn_ln_bias, config.ln_eps)
    return (e, probs) if return_probs else e


def fuse(e: dc.Tensor, g: dc.Tensor, beta: float) -> dc.Tensor:
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if e.shape != g.shape:
        raise dc.ShapeError(f"fuse: incompatible shapes {e.shape} and {g.shape}")
    return g * beta + e * (1.0 - beta)


def feed_forward(u: dc.Tensor, p: BlockParams, config: ModelConfig,
                 training: bool = False, rng: np.random.Generator | None = None) -> dc.Tensor:
    y = dc.gelu(u @ p.w1 + p.b1)
    z = dc.dropout(y @ p.w2 + p.b2, config.dropout, rng, training)
    return dc.layer_norm(z + u, p.out_ln_gain, p.out_ln_bias, config.ln_eps)


def block_forward(x: dc.Tensor, mask: np.ndarray, p: BlockParams, config: ModelConfig,
                  training: bool = False, rng: np.random.Generator | None = None):
    """One block on pad-zeroed input; returns (pad-zeroed output, membership)."""
    g, c = group_branch(x, mask, p.group, config)
    e = self_attention(x, mask, p, config, training, rng)
    u = fuse(e, g, config.beta)
    o = feed_forward(u, p, config, training, rng)
    return o * np.asarray(mask, dtype=o.dtype)[..., None], c


class GritModel:
    def __init__(self, config: ModelConfig, seed: int = 0,
                 init_rng: np.random.Generator | None = None):
        if config.n_items < 1:
            raise ValueError("config.n_items must be set to the catalogue size")
        self.config = config
        rng = init_rng if init_rng is not None else dc.SeedStreams(seed)["init"]
        self.tables: EmbeddingTables = init_tables(config, rng)
        self.blocks: list[BlockParams] = [init_block(config, rng) for _ in range(config.layers)]

    # -- parameters ---------------------------------------------------------

    def named_tensors(self) -> dict[str, dc.Tensor]:
        out = dict(self.tables.named())
        for i, b in enumerate(self.blocks):
            out.update(b.named(f"blocks.{i}."))
        return out

    def parameters(self) -> dict[str, dc.Tensor]:
        """Trainable tensors only."""
        return {k: t for k, t in self.named_tensors().items() if t.requires_grad}

    def group_parameters(self) -> dict[str, dc.Tensor]:
        return {k: t for k, t in self.parameters().items() if ".group." in k}

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_tensors().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        tensors = self.named_tensors()
        missing = set(tensors) ^ set(state)
        if missing:
            raise KeyError(f"state mismatch on {sorted(missing)[:5]}")
        for k, t in tensors.items():
            if state[k].shape != t.shape:
                raise dc.ShapeError(f"{k}: checkpoint {state[k].shape} vs model {t.shape}")
            t.data[...] = state[k]

    @property
    def item_table(self) -> dc.Tensor:
        return self.tables.item

    # -- computation ----------------------------------------------------------

    def forward(self, batch: SequenceBatch, training: bool = False,
                rng: np.random.Generator | None = None):
        cfg = self.config
        x = encode_sequence(batch, self.tables, training, rng, cfg.dropout, cfg.ln_eps)
        traces = []
        for p in self.blocks:
            x, c = block_forward(x, batch.attention_mask, p, cfg, training, rng)
            traces.append(c)
        return x, traces

    def score(self, hidden: dc.Tensor) -> dc.Tensor:
        return score(hidden, self.tables.item)

    def final_scores(self, batch: SequenceBatch) -> np.ndarray:
        """Scores of every item from each row's last position (eval mode)."""
        hidden, _ = self.forward(batch, training=False)
        return self.score(dc.Tensor(hidden.data[:, -1, :])).data


def score(hidden: dc.Tensor, item_table: dc.Tensor) -> dc.Tensor:
    """Dot products of hidden state(s) with every item row; the pad column is -inf."""
    if hidden.ndim == 1:
        hidden = dc.reshape(hidden, (1, -1))
        s = dc.reshape(hidden @ dc.transpose(item_table), (-1,))
    else:
        s = hidden @ dc.transpose(item_table)
    s.data[..., 0] = -np.inf
    return s


# ---------------------------------------------------------------------------
# checkpoints: magic, version, header length, JSON header, raw little-endian arrays


def _encode_checkpoint(config: ModelConfig, state: dict[str, np.ndarray], extra: dict | None) -> bytes:
    names = sorted(state)
    entries, blobs, offset = [], [], 0
    for k in names:
        a = np.ascontiguousarray(state[k])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": k, "shape": list(a.shape), "dtype": a.dtype.str, "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": asdict(config), "tensors": entries, "extra": extra or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for raw in blobs:
        buf.write(raw)
    return buf.getvalue()


def save_checkpoint(model: GritModel, path: str | os.PathLike, extra: dict | None = None) -> None:
    data = _encode_checkpoint(model.config, model.state_dict(), extra)
    with open(path, "wb") as fh:
        fh.write(data)


def read_checkpoint(path: str | os.PathLike):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen])
    base = 16 + hlen
    state = {}
    for e in header["tensors"]:
        lo = base + e["offset"]
        arr = np.frombuffer(blob[lo:lo + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        state[e["name"]] = arr.reshape(e["shape"]).copy()
    return ModelConfig(**header["config"]), state, header.get("extra", {})


def load_checkpoint(path: str | os.PathLike) -> tuple[GritModel, dict]:
    config, state, extra = read_checkpoint(path)
    model = GritModel(config, seed=0)
    model.load_state_dict(state)
    return model, extra
