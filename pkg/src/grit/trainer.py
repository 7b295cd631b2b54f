"""Next-item cross-entropy with seen-item masking, AdamW and early stopping."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .config import TrainConfig
from .dataio import PAD, SequenceBatch, SplitDataset, build_rows, make_batches
from .evalmetrics import evaluate
from .gritblock import save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# objective


def valid_positions(batch: SequenceBatch) -> tuple[np.ndarray, np.ndarray]:
    mask = np.asarray(batch.attention_mask, dtype=bool)
    targets = np.asarray(batch.targets)
    if np.any((targets != PAD) & ~mask):
        rows = np.flatnonzero(((targets != PAD) & ~mask).any(axis=1))
        raise ValueError(f"target on a pad input position in rows {rows[:10].tolist()}")
    return np.nonzero(targets != PAD)


def prefix_seen(batch: SequenceBatch, n_items: int) -> np.ndarray:
    """(B, L, m+1) bool: items consumed up to and including each position.

    Items from earlier chunks (``batch.history``) count as seen everywhere in
    the row; the pad column is always marked.
    """
    ids = np.asarray(batch.item_ids)
    B, L = ids.shape
    seen = np.zeros((B, L, n_items + 1), dtype=bool)
    rows, cols = np.nonzero(ids != PAD)
    seen[rows, cols, ids[rows, cols]] = True
    np.logical_or.accumulate(seen, axis=1, out=seen)
    if batch.history is not None:
        for b, hist in enumerate(batch.history):
            if len(hist):
                seen[b, :, hist] = True
    seen[..., PAD] = True
    return seen


def masked_cross_entropy(logits: dc.Tensor, batch: SequenceBatch,
                         seen: np.ndarray | None = None) -> dc.Tensor:
    """Mean next-item loss over valid positions with seen items excluded.

    ``logits`` is either (B, L, m+1) or already restricted to the valid
    positions, (N, m+1), in row-major order. The ground-truth item is never
    masked, so repeated consumption keeps a finite loss.
    """
    rows, cols = valid_positions(batch)
    if len(rows) == 0:
        raise ValueError("batch has no valid prediction positions")
    n_cols = logits.shape[-1]
    if seen is None:
        seen = prefix_seen(batch, n_cols - 1)
    if logits.ndim == 3:
        B, L, _ = logits.shape
        flat = dc.reshape(logits, (B * L, n_cols))
        logits = dc.embedding(flat, rows * L + cols)
    targets = np.asarray(batch.targets)[rows, cols]
    allowed = ~seen[rows, cols]
    return dc.softmax_cross_entropy(logits, targets, allowed)


def batch_loss(model, batch: SequenceBatch, training: bool = True,
               rng: np.random.Generator | None = None) -> dc.Tensor:
    hidden, _ = model.forward(batch, training=training, rng=rng)
    rows, cols = valid_positions(batch)
    B, L, d = hidden.shape
    h = dc.embedding(dc.reshape(hidden, (B * L, d)), rows * L + cols)
    logits = h @ dc.transpose(model.item_table)
    seen = prefix_seen(batch, model.config.n_items)
    return masked_cross_entropy(logits, batch, seen)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, dc.Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float = 1e-3, weight_decay: float = 0.01, betas=(0.9, 0.999),
               eps: float = 1e-8) -> bool:
    """In-place AdamW update; returns False (and changes nothing) on a non-finite gradient."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in %s; skipping step", k)
            return False
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for k, t in params.items():
        g = grads[k]
        m = state.first.setdefault(k, np.zeros_like(t.data))
        v = state.second.setdefault(k, np.zeros_like(t.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            t.data *= 1.0 - lr * weight_decay
        t.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(t.dtype, copy=False)
    return True


class AdamW:
    """Owns the moment buffers for a fixed set of trainable tensors."""

    def __init__(self, params: dict[str, dc.Tensor], lr: float = 1e-3, weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float | None = None,
                 zero_rows: dict[str, int] | None = None):
        self.params = {k: t for k, t in params.items() if t.requires_grad}
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.clip_norm = clip_norm
        self.zero_rows = zero_rows or {}
        self.state = OptimizerState()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self) -> bool:
        grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data)
                 for k, t in self.params.items()}
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip_norm:
                grads = {k: g * (self.clip_norm / norm) for k, g in grads.items()}
        ok = adamw_step(self.params, grads, self.state, self.lr, self.weight_decay,
                        self.betas, self.eps)
        for k, row in self.zero_rows.items():
            if k in self.params:
                self.params[k].data[row] = 0.0
        return ok


# ---------------------------------------------------------------------------
# training loop


@dataclass
class FitResult:
    best_epoch: int
    best_metric: float
    best_state: dict[str, np.ndarray]
    history: list[dict]
    stopped_early: bool


def _loss_finite(loss: dc.Tensor) -> bool:
    return bool(np.isfinite(loss.data))


def fit(model, split: SplitDataset, config: TrainConfig,
        log_path: str | os.PathLike | None = None,
        checkpoint_path: str | os.PathLike | None = None,
        evaluator: Callable | None = None,
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train with early stopping on validation Recall@10 (``config.monitor_k``).

    ``evaluator(model) -> EvalReport`` overrides the validation pass.
    ``checkpoint_path`` may contain ``{epoch}`` to keep every improvement.
    """
    streams = dc.SeedStreams(config.seed)
    opt = AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay,
                clip_norm=config.clip_norm, zero_rows={"item_emb": PAD})
    rows = build_rows(split, model.config.max_len)
    if evaluator is None:
        cutoffs = tuple(sorted({5, 10, 20, config.monitor_k}))

        def evaluator(m):
            return evaluate(m, split, "valid", batch_size=config.eval_batch_size,
                            exclude_history=config.exclude_history_eval, cutoffs=cutoffs)

    history: list[dict] = []
    best_metric, best_epoch, best_state = -math.inf, 0, model.state_dict()
    stale = 0
    stopped = False
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            total, count = 0.0, 0
            for batch in make_batches(split, model.config.max_len, config.batch_size,
                                      streams["shuffle"], rows=rows):
                if not np.any(batch.targets != PAD):
                    continue
                opt.zero_grad()
                loss = batch_loss(model, batch, training=True, rng=streams["dropout"])
                if not _loss_finite(loss):
                    raise TrainingError(f"non-finite training loss at epoch {epoch}")
                dc.backward(loss)
                opt.step()
                n = int(np.sum(batch.targets != PAD))
                total += float(loss.data) * n
                count += n
            report = evaluator(model)
            r10, m10 = report.get("recall", 10), report.get("mrr", 10)
            watched = report.get("recall", config.monitor_k)
            if math.isnan(watched):
                raise TrainingError(
                    f"validation Recall@{config.monitor_k} is NaN at epoch {epoch} "
                    f"(train loss {total / max(count, 1):.5f})"
                )
            rec = {
                "epoch": epoch,
                "train_loss": total / max(count, 1),
                "recall@10": r10,
                "mrr@10": m10,
                "elapsed_s": round(time.perf_counter() - t0, 3),
            }
            if config.monitor_k != 10:
                rec[f"recall@{config.monitor_k}"] = watched
            history.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            log.info("epoch %d loss %.4f recall@10 %.4f mrr@10 %.4f (%.1fs)", epoch,
                     rec["train_loss"], r10, m10, rec["elapsed_s"])
            if on_epoch is not None:
                on_epoch(rec)
            if watched > best_metric:
                best_metric, best_epoch, stale = watched, epoch, 0
                best_state = model.state_dict()
                if checkpoint_path is not None:
                    save_checkpoint(model, str(checkpoint_path).format(epoch=epoch),
                                    extra={"epoch": epoch, "valid_recall@10": r10, "valid_mrr@10": m10})
            else:
                stale += 1
                if stale >= config.patience:
                    stopped = True
                    break
    finally:
        if log_fh is not None:
            log_fh.close()
    model.load_state_dict(best_state)
    return FitResult(best_epoch, best_metric, best_state, history, stopped)
