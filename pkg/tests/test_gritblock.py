import numpy as np
import pytest

from grit import diffcore as dc
from grit.config import ModelConfig
from grit.dataio import SequenceBatch
from grit.gritblock import (GritModel, attention_mask, block_forward, feed_forward, fuse,
                            init_block, load_checkpoint, read_checkpoint, save_checkpoint, score,
                            self_attention)
from grit.seqencode import encode_sequence


def T(x, grad=False):
    return dc.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def _cfg(**kw):
    base = dict(n_items=9, d=8, max_len=6, layers=2, heads=2, kappa=3, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def _batch(ids):
    ids = np.asarray(ids)
    return SequenceBatch(ids, ids != 0, np.zeros_like(ids))


def _ln(x, eps=1e-12):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + eps)


def test_length_one_attention_is_identity_weighting():
    cfg = _cfg(max_len=2)
    p = init_block(cfg, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(1, 1, 8))
    e = self_attention(T(x), np.array([[True]]), p, cfg).data
    v = x @ p.wv.data + p.bv.data
    ref = _ln(x + v @ p.wo.data + p.bo.data)
    np.testing.assert_allclose(e, ref, rtol=1e-10, atol=1e-12)


def test_attention_rows_sum_to_one_over_allowed_keys():
    cfg = _cfg()
    p = init_block(cfg, np.random.default_rng(0))
    mask = np.array([[False, False, True, True, True, True], [True] * 6])
    x = np.random.default_rng(1).normal(size=(2, 6, 8)) * mask[..., None]
    _, probs = self_attention(T(x), mask, p, cfg, return_probs=True)
    allowed = attention_mask(mask)
    np.testing.assert_allclose(probs.data.sum(-1), 1.0, atol=1e-12)
    assert np.all(probs.data[~np.broadcast_to(allowed, probs.shape)] == 0)
    # real queries never attend to pad keys
    assert np.all(probs.data[0, :, 2:, :2] == 0)


def test_causality_per_block():
    cfg = _cfg()
    p = init_block(cfg, np.random.default_rng(0))
    mask = np.ones((1, 6), bool)
    x = np.random.default_rng(1).normal(size=(1, 6, 8))
    base, _ = block_forward(T(x), mask, p, cfg)
    for j in range(6):
        y = x.copy()
        y[0, j] += 1.0
        out, _ = block_forward(T(y), mask, p, cfg)
        assert np.array_equal(out.data[0, :j], base.data[0, :j])


def test_fuse_examples():
    e, g = T([[0.0, 2.0]]), T([[2.0, 0.0]])
    np.testing.assert_array_equal(fuse(e, g, 0.5).data, [[1.0, 1.0]])
    assert np.array_equal(fuse(e, g, 0.0).data, e.data)
    assert np.array_equal(fuse(e, g, 1.0).data, g.data)
    for beta in (-0.1, 1.1):
        with pytest.raises(ValueError):
            fuse(e, g, beta)
    with pytest.raises(dc.ShapeError):
        fuse(e, T([[1.0]]), 0.5)


def test_ffn_zero_weights_is_layernorm():
    cfg = _cfg()
    p = init_block(cfg, np.random.default_rng(0))
    for t in (p.w1, p.b1, p.w2, p.b2):
        t.data[...] = 0
    u = np.random.default_rng(1).normal(size=(2, 3, 8))
    np.testing.assert_allclose(feed_forward(T(u), p, cfg).data, _ln(u), rtol=1e-12)


def test_ffn_positionwise_equivariance():
    cfg = _cfg()
    p = init_block(cfg, np.random.default_rng(0))
    u = np.random.default_rng(1).normal(size=(1, 6, 8))
    perm = np.random.default_rng(2).permutation(6)
    a = feed_forward(T(u), p, cfg).data[:, perm]
    b = feed_forward(T(u[:, perm]), p, cfg).data
    np.testing.assert_array_equal(a, b)


def test_ffn_gradient():
    cfg = _cfg()
    rng = np.random.default_rng(3)
    p = init_block(cfg, rng)
    for t in (p.w1, p.w2):
        t.data += rng.normal(0, 0.3, t.shape)
    u = T(rng.normal(size=(1, 3, 8)), grad=True)
    wts = rng.normal(size=(1, 3, 8))
    assert dc.finite_difference_check(lambda t: (feed_forward(t, p, cfg) * wts).sum(), u, h=1e-6) < 1e-4


def _group_free_forward(model, batch):
    cfg = model.config
    x = encode_sequence(batch, model.tables, False, None, cfg.dropout, cfg.ln_eps)
    m = np.asarray(batch.attention_mask, dtype=x.dtype)[..., None]
    for p in model.blocks:
        x = feed_forward(self_attention(x, batch.attention_mask, p, cfg), p, cfg) * m
    return x


def test_beta_zero_equals_group_free_stack():
    model = GritModel(_cfg(beta=0.0), seed=5)
    b = _batch([[0, 0, 3, 1, 4, 1], [5, 9, 2, 6, 5, 3]])
    hidden, _ = model.forward(b)
    assert np.array_equal(hidden.data, _group_free_forward(model, b).data)


def test_model_shapes_and_determinism():
    model = GritModel(_cfg(), seed=0)
    b = _batch([[0, 0, 3, 1, 4, 1], [5, 9, 2, 6, 5, 3]])
    h1, traces = model.forward(b)
    h2, _ = model.forward(b)
    assert h1.shape == (2, 6, 8)
    assert len(traces) == 2 and all(c.shape == (2, 6, 3) for c in traces)
    assert np.array_equal(h1.data, h2.data)
    assert np.all(h1.data[0, :2] == 0)


def test_group_params_are_per_block():
    model = GritModel(_cfg(), seed=0)
    names = model.group_parameters()
    assert any(k.startswith("blocks.0.group.") for k in names)
    assert any(k.startswith("blocks.1.group.") for k in names)
    assert model.blocks[0].group.groups is not model.blocks[1].group.groups


def test_scoring():
    rng = np.random.default_rng(0)
    table = np.linalg.qr(rng.normal(size=(8, 8)))[0][:6]  # orthonormal rows
    table[0] = 0
    for k in range(1, 6):
        s = score(T(table[k]), T(table)).data
        assert s[0] == -np.inf and int(np.argmax(s)) == k
    h = rng.normal(size=(3, 8))
    s = score(T(h), T(table)).data
    for r in range(3):
        for i in range(1, 6):
            assert s[r, i] == pytest.approx(sum(h[r, k] * table[i, k] for k in range(8)), rel=1e-10, abs=1e-12)


def test_checkpoint_round_trip(tmp_path):
    model = GritModel(_cfg(dtype="float32"), seed=1)
    save_checkpoint(model, tmp_path / "a.grit", extra={"epoch": 3})
    back, extra = load_checkpoint(tmp_path / "a.grit")
    assert extra == {"epoch": 3} and back.config == model.config
    save_checkpoint(back, tmp_path / "b.grit", extra={"epoch": 3})
    assert (tmp_path / "a.grit").read_bytes() == (tmp_path / "b.grit").read_bytes()
    b = _batch([[0, 1, 2, 3, 4, 5]])
    assert np.array_equal(model.final_scores(b), back.final_scores(b))


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x.grit"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        read_checkpoint(p)


def test_weight_tying():
    model = GritModel(_cfg(), seed=0)
    b = _batch([[0, 1, 2, 3, 4, 5]])
    before = model.final_scores(b)
    model.tables.item.data[3] += 1.0
    assert model.item_table is model.tables.item
    assert not np.array_equal(before, model.final_scores(b))


def test_fusion_linearity():
    rng = np.random.default_rng(0)
    e, g = T(rng.normal(size=(2, 3, 4))), T(rng.normal(size=(2, 3, 4)))
    for b1, b2 in [(0.1, 0.7), (0.0, 1.0), (0.3, 0.3)]:
        lhs = fuse(e, g, b1).data + fuse(e, g, b2).data
        np.testing.assert_allclose(lhs, 2 * fuse(e, g, (b1 + b2) / 2).data, atol=1e-12)
