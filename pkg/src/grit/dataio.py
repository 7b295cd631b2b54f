"""Interaction-log ingestion, 5-core filtering, leave-one-out split and batching."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator

import numpy as np

log = logging.getLogger(__name__)

FORMATS = ("movielens", "csv")
CACHE_FORMAT = "grit-dataset/1"
PAD = 0


class DataError(Exception):
    pass


@dataclass
class InteractionLog:
    users: list[str] = field(default_factory=list)
    items: list[str] = field(default_factory=list)
    timestamps: list[int] = field(default_factory=list)
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.users)

    def append(self, user: str, item: str, ts: int) -> None:
        self.users.append(user)
        self.items.append(item)
        self.timestamps.append(ts)


@dataclass
class Dataset:
    user_ids: list[str]  # dense user index -> raw id
    item_ids: list[str]  # dense item index -> raw id; entry 0 is the pad token
    sequences: list[np.ndarray]  # chronological item indices per user

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids) - 1

    @property
    def n_interactions(self) -> int:
        return int(sum(len(s) for s in self.sequences))

    @cached_property
    def _user_lookup(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.user_ids)}

    def user_index(self, raw: str) -> int:
        return self._user_lookup[raw]

    def encode_items(self, raw: list[str]) -> list[int]:
        lookup = {r: i for i, r in enumerate(self.item_ids) if i}
        return [lookup[r] for r in raw]

    def decode_items(self, idx) -> list[str]:
        return [self.item_ids[int(i)] for i in idx]

    def to_log(self) -> InteractionLog:
        """Re-emit the sequences as a log with position-based timestamps."""
        out = InteractionLog()
        for raw, seq in zip(self.user_ids, self.sequences):
            for t, i in enumerate(seq):
                out.append(raw, self.item_ids[int(i)], t)
        return out

    def stats(self) -> dict:
        n = self.n_interactions
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": n,
            "sparsity": 1.0 - n / (self.n_users * self.n_items),
        }


@dataclass
class SplitDataset:
    dataset: Dataset
    train: list[np.ndarray]
    valid: np.ndarray
    test: np.ndarray

    @property
    def n_items(self) -> int:
        return self.dataset.n_items

    def context(self, user: int, phase: str) -> np.ndarray:
        """Input history for ranking the held-out item of ``phase``."""
        if phase == "valid":
            return self.train[user]
        if phase == "test":
            return np.append(self.train[user], self.valid[user])
        raise ValueError(f"phase must be 'valid' or 'test', got {phase!r}")

    def target(self, user: int, phase: str) -> int:
        return int(self.valid[user] if phase == "valid" else self.test[user])


@dataclass
class SequenceBatch:
    item_ids: np.ndarray  # B x L int
    attention_mask: np.ndarray  # B x L bool, True = real item
    targets: np.ndarray  # B x L int, 0 = no prediction
    users: np.ndarray | None = None  # B dense user indices
    history: list[np.ndarray] | None = None  # items seen before each row's first slot

    def __len__(self) -> int:
        return self.item_ids.shape[0]


# ---------------------------------------------------------------------------
# loading


def _parse_ts(s: str) -> int:
    s = s.strip()
    try:
        return int(s)
    except ValueError:
        v = float(s)
        if not v.is_integer():
            raise
        return int(v)


def load_log(path: str | os.PathLike, fmt: str = "movielens") -> InteractionLog:
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    out = InteractionLog()
    bad: list[int] = []
    total = 0
    with fh:
        if fmt == "movielens":
            rows = (line.rstrip("\r\n").split("\t") for line in fh)
            cols = (0, 1, 3)
            ncol = 4
        else:
            rows = csv.reader(fh)
            cols, ncol = (0, 1, 2), 3
        for lineno, row in enumerate(rows, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if fmt == "csv" and lineno == 1 and row[0].strip().lower() == "user_id":
                header = [c.strip().lower() for c in row]
                try:
                    cols = tuple(header.index(c) for c in ("user_id", "item_id", "timestamp"))
                except ValueError:
                    raise DataError(f"{path}: CSV header must contain user_id,item_id,timestamp") from None
                ncol = max(cols) + 1
                continue
            total += 1
            try:
                if len(row) < ncol:
                    raise ValueError("too few columns")
                user, item = row[cols[0]].strip(), row[cols[1]].strip()
                if not user or not item:
                    raise ValueError("empty id")
                out.append(user, item, _parse_ts(row[cols[2]]))
            except ValueError:
                bad.append(lineno)

    out.skipped = len(bad)
    if bad and len(bad) > 0.01 * total:
        raise DataError(
            f"{path}: {len(bad)} of {total} lines malformed; first: {bad[:10]}"
        )
    if bad:
        log.warning("%s: skipped %d malformed lines", path, len(bad))
    return out


# ---------------------------------------------------------------------------
# filtering and splitting


def five_core_filter(log_: InteractionLog, k: int = 5) -> Dataset:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    if len(log_) == 0:
        raise DataError("empty interaction log")
    keep = np.ones(len(log_), dtype=bool)
    users = np.asarray(log_.users, dtype=object)
    items = np.asarray(log_.items, dtype=object)
    while True:
        uc = Counter(users[keep])
        ic = Counter(items[keep])
        drop = keep & (
            np.fromiter((uc[u] < k for u in users), bool, len(users))
            | np.fromiter((ic[i] < k for i in items), bool, len(items))
        )
        if not drop.any():
            break
        keep &= ~drop
    if not keep.any():
        raise DataError("dataset eliminated by 5-core")

    idx = np.flatnonzero(keep)
    ts = np.asarray(log_.timestamps, dtype=np.int64)
    # dense ids in order of first appearance in the file
    user_ids = list(dict.fromkeys(users[idx]))
    item_ids = ["<pad>"] + list(dict.fromkeys(items[idx]))
    ulook = {u: i for i, u in enumerate(user_ids)}
    ilook = {it: i for i, it in enumerate(item_ids) if i}

    per_user: list[list[int]] = [[] for _ in user_ids]
    for r in idx:
        per_user[ulook[users[r]]].append(r)
    sequences = []
    for rows in per_user:
        rows = np.asarray(rows)
        # stable sort: equal timestamps keep file order
        rows = rows[np.argsort(ts[rows], kind="stable")]
        sequences.append(np.asarray([ilook[items[r]] for r in rows], dtype=np.int64))
    return Dataset(user_ids=user_ids, item_ids=item_ids, sequences=sequences)


def leave_one_out_split(ds: Dataset) -> SplitDataset:
    short = [ds.user_ids[u] for u, s in enumerate(ds.sequences) if len(s) < 3]
    if short:
        raise DataError(f"sequences shorter than 3 for users: {short[:20]}")
    return SplitDataset(
        dataset=ds,
        train=[s[:-2] for s in ds.sequences],
        valid=np.asarray([s[-2] for s in ds.sequences], dtype=np.int64),
        test=np.asarray([s[-1] for s in ds.sequences], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# batching


def left_pad(seq: np.ndarray, L: int) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.int64)[-L:]
    out = np.zeros(L, dtype=np.int64)
    if len(seq):
        out[L - len(seq):] = seq
    return out


def chunk_rows(seq: np.ndarray, L: int) -> list[tuple[np.ndarray, np.ndarray, int]]:
    """End-anchored, non-overlapping chunks of ``seq``.

    Returns ``(items, targets, start)`` per chunk, oldest chunk first; each
    array is left-padded to length ``L`` and ``start`` is the offset of the
    chunk's first item in ``seq``.
    """
    seq = np.asarray(seq, dtype=np.int64)
    n = len(seq)
    succ = np.append(seq[1:], PAD)
    rows = []
    end = n
    while end > 0:
        start = max(0, end - L)
        rows.append((left_pad(seq[start:end], L), left_pad(succ[start:end], L), start))
        end = start
    return rows[::-1]


def build_rows(split: SplitDataset, L: int) -> SequenceBatch:
    """All training rows, in user order, as one big batch."""
    if L < 2:
        raise ValueError("max length L must be >= 2")
    items, targets, users, history = [], [], [], []
    for u, seq in enumerate(split.train):
        for it, tg, start in chunk_rows(seq, L):
            items.append(it)
            targets.append(tg)
            users.append(u)
            history.append(seq[:start])
    if not items:
        empty = np.zeros((0, L), dtype=np.int64)
        return SequenceBatch(empty, empty.astype(bool), empty, np.zeros(0, np.int64), [])
    item_ids = np.stack(items)
    return SequenceBatch(
        item_ids=item_ids,
        attention_mask=item_ids != PAD,
        targets=np.stack(targets),
        users=np.asarray(users, dtype=np.int64),
        history=history,
    )


def take_rows(rows: SequenceBatch, idx: np.ndarray) -> SequenceBatch:
    return SequenceBatch(
        item_ids=rows.item_ids[idx],
        attention_mask=rows.attention_mask[idx],
        targets=rows.targets[idx],
        users=None if rows.users is None else rows.users[idx],
        history=None if rows.history is None else [rows.history[i] for i in idx],
    )


def make_batches(
    split: SplitDataset,
    L: int,
    B: int,
    shuffle_seed: int | np.random.Generator | None = None,
    rows: SequenceBatch | None = None,
) -> Iterator[SequenceBatch]:
    """Yield training batches; row order is shuffled when a seed or generator is given."""
    rows = rows if rows is not None else build_rows(split, L)
    n = len(rows)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        rng = shuffle_seed if isinstance(shuffle_seed, np.random.Generator) else np.random.default_rng(shuffle_seed)
        order = rng.permutation(n)
    for lo in range(0, n, B):
        yield take_rows(rows, order[lo:lo + B])


def context_batch(split: SplitDataset, users, phase: str, L: int) -> SequenceBatch:
    """Left-padded evaluation inputs (most recent ``L`` items of each context)."""
    ctx = [split.context(int(u), phase) for u in users]
    item_ids = np.stack([left_pad(c, L) for c in ctx]) if ctx else np.zeros((0, L), np.int64)
    history = [c[:max(0, len(c) - L)] for c in ctx]
    return SequenceBatch(
        item_ids=item_ids,
        attention_mask=item_ids != PAD,
        targets=np.zeros_like(item_ids),
        users=np.asarray(users, dtype=np.int64),
        history=history,
    )


# ---------------------------------------------------------------------------
# cache


def save_dataset(ds: Dataset, path: str | os.PathLike, source: dict | None = None) -> None:
    with open(path, "w") as fh:
        header = {"format": CACHE_FORMAT, "source": source or {}, **ds.stats()}
        fh.write(json.dumps(header) + "\n")
        fh.write(json.dumps({"item_ids": ds.item_ids}) + "\n")
        for raw, seq in zip(ds.user_ids, ds.sequences):
            fh.write(json.dumps({"user": raw, "items": [int(i) for i in seq]}) + "\n")


def read_cache_header(path: str | os.PathLike) -> dict:
    with open(path) as fh:
        header = json.loads(fh.readline())
    if header.get("format") != CACHE_FORMAT:
        raise DataError(f"{path}: not a {CACHE_FORMAT} cache (format={header.get('format')!r})")
    return header


def load_dataset(path: str | os.PathLike) -> Dataset:
    try:
        read_cache_header(path)
        with open(path) as fh:
            fh.readline()
            item_ids = json.loads(fh.readline())["item_ids"]
            users, seqs = [], []
            for line in fh:
                rec = json.loads(line)
                users.append(rec["user"])
                seqs.append(np.asarray(rec["items"], dtype=np.int64))
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load dataset cache {path}: {exc}") from exc
    return Dataset(user_ids=users, item_ids=item_ids, sequences=seqs)


def file_fingerprint(path: str | os.PathLike, fmt: str | None = None) -> dict:
    """Content digest of a raw log, stored in the cache header for idempotent prepares."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    out = {"path": str(Path(path).resolve()), "size": Path(path).stat().st_size, "sha256": h.hexdigest()}
    if fmt is not None:
        out["format"] = fmt
    return out
