"""Full-catalogue ranking of the held-out item and Recall/NDCG/MRR@k."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .dataio import PAD, SplitDataset, context_batch

CUTOFFS = (5, 10, 20)


@dataclass
class EvalReport:
    metrics: dict[str, dict[int, float]]  # metric -> k -> mean value
    ranks: np.ndarray  # 1-based rank of the target, in user order
    users: np.ndarray
    phase: str = "test"
    extra: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.ranks)

    def get(self, metric: str, k: int) -> float:
        return self.metrics[metric][k]

    def to_json(self) -> dict:
        return {
            "phase": self.phase,
            "users": self.n_users,
            "metrics": {m: {str(k): v for k, v in by_k.items()} for m, by_k in self.metrics.items()},
        }

    def write(self, path: str | os.PathLike, ranks_csv: str | os.PathLike | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")
        if ranks_csv is not None:
            with open(ranks_csv, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["user", "rank"])
                w.writerows(zip(self.users.tolist(), self.ranks.tolist()))


def rank_target(scores: np.ndarray, target: int) -> int:
    """1-based rank with pessimistic ties: every tied item ranks above the target."""
    if target == PAD:
        raise ValueError("target is the pad item")
    scores = np.asarray(scores)
    t = scores[target]
    return int(np.sum(scores >= t))


def rank_targets(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Row-wise :func:`rank_target` for a (n, m+1) score matrix."""
    targets = np.asarray(targets)
    if np.any(targets == PAD):
        raise ValueError("target is the pad item")
    t = scores[np.arange(len(targets)), targets][:, None]
    return np.sum(scores >= t, axis=1)


def metrics_at_k(ranks, k: int) -> tuple[float, float, float]:
    """(Recall, NDCG, MRR)@k for one relevant item per user.

    Means use correctly rounded sums, so the result does not depend on the
    order of the users.
    """
    if k < 1:
        raise ValueError(f"cutoff must be >= 1, got {k}")
    ranks = [int(r) for r in np.asarray(ranks).ravel()]
    if not ranks:
        raise ValueError("empty rank list")
    if min(ranks) < 1:
        raise ValueError("ranks are 1-based")
    n = len(ranks)
    hits = [r for r in ranks if r <= k]
    recall = len(hits) / n
    ndcg = math.fsum(1.0 / math.log2(r + 1) for r in hits) / n
    mrr = math.fsum(1.0 / r for r in hits) / n
    return recall, ndcg, mrr


def summarize(ranks, cutoffs=CUTOFFS) -> dict[str, dict[int, float]]:
    out: dict[str, dict[int, float]] = {"recall": {}, "ndcg": {}, "mrr": {}}
    for k in cutoffs:
        r, n, m = metrics_at_k(ranks, k)
        out["recall"][k], out["ndcg"][k], out["mrr"][k] = r, n, m
    return out


def evaluate(model, split: SplitDataset, phase: str = "test", batch_size: int = 256,
             exclude_history: bool = False, users=None, cutoffs=CUTOFFS) -> EvalReport:
    """Rank each user's held-out item against the whole catalogue.

    With ``exclude_history`` the user's context items are removed from the
    candidates (the target itself always stays).
    """
    if phase not in ("valid", "test"):
        raise ValueError(f"phase must be 'valid' or 'test', got {phase!r}")
    L = model.config.max_len
    users = np.arange(split.dataset.n_users) if users is None else np.asarray(users)
    ranks = np.zeros(len(users), dtype=np.int64)
    for lo in range(0, len(users), batch_size):
        chunk = users[lo:lo + batch_size]
        batch = context_batch(split, chunk, phase, L)
        scores = model.final_scores(batch)
        if np.isnan(scores).any():
            raise FloatingPointError(f"NaN scores for users {chunk[np.isnan(scores).any(axis=1)][:10].tolist()}")
        targets = np.asarray([split.target(int(u), phase) for u in chunk])
        if exclude_history:
            for r, u in enumerate(chunk):
                ctx = split.context(int(u), phase)
                ctx = ctx[ctx != targets[r]]
                scores[r, ctx] = -np.inf
        ranks[lo:lo + len(chunk)] = rank_targets(scores, targets)
    return EvalReport(summarize(ranks, cutoffs), ranks, users, phase)
