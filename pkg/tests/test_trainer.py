import json
import logging
import math

import numpy as np
import pytest

from grit import diffcore as dc
from grit.config import TrainConfig
from grit.dataio import PAD, SequenceBatch, build_rows
from grit.evalmetrics import EvalReport
from grit.gritblock import GritModel
from grit.trainer import (AdamW, OptimizerState, TrainingError, adamw_step, batch_loss, fit,
                          masked_cross_entropy, prefix_seen)


def T(x, grad=True):
    return dc.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def _one_step_batch(items, target):
    ids = np.array([items])
    tg = np.zeros_like(ids)
    tg[0, -1] = target
    return SequenceBatch(ids, ids != PAD, tg)


def test_two_equal_candidates_ln2():
    # vocabulary {1, 2, 3}; item 3 was consumed, so only 1 and 2 compete
    batch = _one_step_batch([0, 3], 1)
    logits = T(np.array([[[0, 0, 0, 0], [0, 0.7, 0.7, 5.0]]]))
    loss = masked_cross_entropy(logits, batch)
    assert float(loss.data) == pytest.approx(math.log(2), rel=1e-12)


def test_prefix_item_gets_zero_probability():
    batch = _one_step_batch([0, 3], 1)
    logits = T(np.array([[[0, 0, 0, 0], [0, 0.1, 0.2, 9.0]]]))
    loss = masked_cross_entropy(logits, batch)
    dc.backward(loss)
    # gradient of mean CE is p - onehot; the masked column has p == 0 exactly
    assert logits.grad[0, 1, 3] == 0.0 and logits.grad[0, 1, 0] == 0.0


def test_three_item_hand_computation():
    batch = _one_step_batch([2, 1], 3)
    z = np.array([0.0, 1.0, -0.5, 0.25])
    logits = T(np.stack([np.zeros(4), z])[None])
    # seen: {2, 1} plus pad; target 3 is the only remaining candidate
    assert float(masked_cross_entropy(logits, batch).data) == pytest.approx(0.0, abs=1e-12)
    # target is item 1, which is in the prefix but never masked
    batch = _one_step_batch([2, 1], 1)
    ref = -(1.0 - math.log(math.exp(1.0) + math.exp(0.25)))
    assert float(masked_cross_entropy(logits, batch).data) == pytest.approx(ref, rel=1e-10)


def test_target_on_pad_input_rejected():
    ids = np.array([[0, 0, 1, 2]])
    tg = np.array([[0, 3, 2, 0]])
    with pytest.raises(ValueError, match="pad"):
        masked_cross_entropy(T(np.zeros((1, 4, 4))), SequenceBatch(ids, ids != 0, tg))


def test_prefix_seen_includes_history():
    ids = np.array([[0, 2, 3]])
    b = SequenceBatch(ids, ids != 0, np.zeros_like(ids), history=[np.array([4])])
    seen = prefix_seen(b, 4)
    assert seen[0, 1].tolist() == [True, False, True, False, True]
    assert seen[0, 2].tolist() == [True, False, True, True, True]


def test_adam_zero_grad_no_decay_unchanged():
    p = {"w": T([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, OptimizerState(), weight_decay=0.0)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step():
    p = {"w": T([0.5])}
    adamw_step(p, {"w": np.ones(1)}, OptimizerState(), lr=1e-3, weight_decay=0.0)
    assert p["w"].data[0] - 0.5 == pytest.approx(-1e-3, rel=1e-6)


def test_decoupled_decay_factor():
    p = {"w": T([2.0])}
    st = OptimizerState()
    for n in range(1, 4):
        adamw_step(p, {"w": np.zeros(1)}, st, lr=1e-3, weight_decay=0.01)
        assert p["w"].data[0] == pytest.approx(2.0 * (1 - 1e-5) ** n, rel=1e-14)


def test_non_finite_gradient_skips_step(caplog):
    p = {"a": T([1.0]), "b": T([1.0])}
    st = OptimizerState()
    with caplog.at_level(logging.WARNING):
        ok = adamw_step(p, {"a": np.ones(1), "b": np.array([np.nan])}, st)
    assert not ok and st.step == 0
    assert p["a"].data[0] == 1.0
    assert "b" in caplog.text


def test_pad_row_rezeroed_and_frozen_untouched():
    table = T(np.ones((3, 2)))
    frozen = T(np.ones(2), grad=False)
    opt = AdamW({"item_emb": table, "frozen": frozen}, zero_rows={"item_emb": 0})
    table.grad = np.ones((3, 2))
    opt.step()
    assert np.all(table.data[0] == 0) and np.all(frozen.data == 1)


def _const_evaluator(model):
    return EvalReport({"recall": {10: 0.3}, "mrr": {10: 0.1}}, np.ones(1, int), np.zeros(1, int), "valid")


def test_patience_stops_at_epoch_11(toy_split, toy_config):
    model = GritModel(toy_config, seed=0)
    res = fit(model, toy_split, TrainConfig(max_epochs=50, patience=10, batch_size=64),
              evaluator=_const_evaluator)
    assert len(res.history) == 11 and res.stopped_early and res.best_epoch == 1


def test_nan_metric_aborts(toy_split, toy_config):
    def nan_eval(model):
        return EvalReport({"recall": {10: float("nan")}, "mrr": {10: 0.0}}, np.ones(1, int), np.zeros(1, int))

    with pytest.raises(TrainingError, match="NaN"):
        fit(GritModel(toy_config, seed=0), toy_split, TrainConfig(max_epochs=3), evaluator=nan_eval)


def _run_log(split, cfg, path):
    fit(GritModel(cfg, seed=3), split, TrainConfig(max_epochs=4, seed=3, batch_size=16), log_path=path)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    for r in recs:
        r.pop("elapsed_s")
    return recs


def test_deterministic_log(tmp_path, toy_split, toy_config):
    a = _run_log(toy_split, toy_config, tmp_path / "a.jsonl")
    b = _run_log(toy_split, toy_config, tmp_path / "b.jsonl")
    assert a == b and len(a) == 4
    assert set(a[0]) == {"epoch", "train_loss", "recall@10", "mrr@10"}


def test_loss_decreases(toy_split, toy_config):
    res = fit(GritModel(toy_config, seed=0), toy_split,
              TrainConfig(max_epochs=5, patience=10, batch_size=16))
    assert res.history[4]["train_loss"] < res.history[0]["train_loss"]


def test_target_probability_positive(toy_split, toy_config):
    model = GritModel(toy_config, seed=0)
    rows = build_rows(toy_split, toy_config.max_len)
    hidden, _ = model.forward(rows)
    logits = hidden.data @ model.item_table.data.T
    seen = prefix_seen(rows, toy_config.n_items)
    r, c = np.nonzero(rows.targets != PAD)
    tg = rows.targets[r, c]
    z = np.where(seen[r, c], -np.inf, logits[r, c])
    z[np.arange(len(tg)), tg] = logits[r, c, tg]
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    assert np.all(p[np.arange(len(tg)), tg] > 0)
    assert np.isfinite(float(batch_loss(model, rows, training=False).data))


def test_checkpoint_reproduces_validation(tmp_path, toy_split, toy_config):
    from grit.evalmetrics import evaluate
    from grit.gritblock import load_checkpoint
    model = GritModel(toy_config, seed=0)
    res = fit(model, toy_split, TrainConfig(max_epochs=3, batch_size=16),
              checkpoint_path=tmp_path / "ck-{epoch}.grit")
    back, extra = load_checkpoint(tmp_path / f"ck-{res.best_epoch}.grit")
    assert extra["epoch"] == res.best_epoch
    assert evaluate(back, toy_split, "valid").get("recall", 10) == res.best_metric
