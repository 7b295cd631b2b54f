"""Group-similarity matrices and per-user membership timelines."""
from __future__ import annotations

import csv
import logging
import os

import numpy as np

from .dataio import PAD, SequenceBatch, SplitDataset, left_pad

log = logging.getLogger(__name__)


def cosine_matrix(G: np.ndarray) -> np.ndarray:
    """Cosine similarity between the columns of ``G`` (d x kappa).

    A zero-norm column gets a zero row and column, with 1 on its diagonal.
    """
    G = np.asarray(G, dtype=np.float64)
    norms = np.linalg.norm(G, axis=0)
    dead = norms == 0
    if dead.any():
        log.warning("group columns %s have zero norm", np.flatnonzero(dead).tolist())
    unit = np.divide(G, norms, out=np.zeros_like(G), where=~dead)
    M = unit.T @ unit
    M = 0.5 * (M + M.T)
    np.clip(M, -1.0, 1.0, out=M)
    np.fill_diagonal(M, 1.0)
    return M


def group_similarity(model, block_index: int = -1) -> np.ndarray:
    n = len(model.blocks)
    if not -n <= block_index < n:
        raise IndexError(f"block_index {block_index} out of range for {n} blocks")
    return cosine_matrix(model.blocks[block_index].group.groups.data)


def write_matrix_csv(M: np.ndarray, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(range(M.shape[1])))
        for row in M:
            w.writerow([repr(float(v)) for v in row])


def write_matrix_gnuplot(M: np.ndarray, path: str | os.PathLike) -> None:
    # `plot 'file' matrix with image`
    np.savetxt(path, M, fmt="%.10g")


def _resolve_user(split: SplitDataset, user) -> int:
    ds = split.dataset
    if isinstance(user, (int, np.integer)) and not isinstance(user, bool):
        if not 0 <= int(user) < ds.n_users:
            raise KeyError(f"unknown user index {user}")
        return int(user)
    try:
        return ds.user_index(str(user))
    except KeyError:
        raise KeyError(f"unknown user {user!r}") from None


def membership_timeline(model, user, split: SplitDataset) -> np.ndarray:
    """Final-block memberships over the user's most recent ``L`` items.

    ``user`` is a raw user id (str) or a dense index (int). Returns an
    array of shape (min(len(sequence), L), kappa).
    """
    u = _resolve_user(split, user)
    L = model.config.max_len
    seq = split.dataset.sequences[u]
    ids = left_pad(seq, L)[None]
    mask = ids != PAD
    batch = SequenceBatch(ids, mask, np.zeros_like(ids), np.asarray([u]),
                          [np.asarray(seq[:max(0, len(seq) - L)])])
    _, traces = model.forward(batch, training=False)
    c = traces[-1].data[0]
    return c[mask[0]].astype(np.float64)


def write_timeline_csv(timeline: np.ndarray, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestep"] + [f"g{k}" for k in range(timeline.shape[1])])
        for t, row in enumerate(timeline):
            w.writerow([t] + [repr(float(v)) for v in row])
