from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grit.dataio import (PAD, DataError, Dataset, InteractionLog, build_rows, chunk_rows,
                         context_batch, five_core_filter, leave_one_out_split, load_dataset,
                         load_log, make_batches, save_dataset)


def _log(triples):
    out = InteractionLog()
    for u, i, t in triples:
        out.append(u, i, t)
    return out


def _core_oracle(triples, k=5):
    rows = list(triples)
    while True:
        uc = Counter(u for u, _, _ in rows)
        ic = Counter(i for _, i, _ in rows)
        kept = [r for r in rows if uc[r[0]] >= k and ic[r[1]] >= k]
        if len(kept) == len(rows):
            return kept
        rows = kept


def test_empty_file(tmp_path):
    p = tmp_path / "empty.tsv"
    p.write_text("")
    log = load_log(p)
    assert len(log) == 0 and log.skipped == 0


def test_single_csv_line(tmp_path):
    p = tmp_path / "one.csv"
    p.write_text("u1,i1,100\n")
    log = load_log(p, "csv")
    assert (log.users, log.items, log.timestamps) == (["u1"], ["i1"], [100])


def test_csv_with_header(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("user_id,item_id,timestamp\nu1,i1,5\nu2,i1,6\n")
    assert len(load_log(p, "csv")) == 2


def test_movielens_columns(tmp_path):
    p = tmp_path / "u.data"
    p.write_text("1\t10\t4\t881250949\n2\t20\t3\t881250950\n")
    log = load_log(p)
    assert log.users == ["1", "2"] and log.items == ["10", "20"]
    assert log.timestamps == [881250949, 881250950]


def test_unreadable_file(tmp_path):
    with pytest.raises(DataError):
        load_log(tmp_path / "missing.tsv")


def test_malformed_lines_report_first_ten(tmp_path):
    p = tmp_path / "bad.tsv"
    lines = ["1\t2\t3\t4"] * 50 + ["garbage"] * 12
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError) as err:
        load_log(p)
    assert str(list(range(51, 61))) in str(err.value)


def test_few_malformed_lines_are_skipped(tmp_path):
    p = tmp_path / "ok.tsv"
    p.write_text("\n".join(["1\t2\t3\t4"] * 200 + ["junk"]) + "\n")
    log = load_log(p)
    assert len(log) == 200 and log.skipped == 1


def test_five_core_fixed_point_unchanged():
    triples = [(f"u{u}", f"i{i}", u * 10 + i) for u in range(6) for i in range(6)]
    ds = five_core_filter(_log(triples))
    assert (ds.n_users, ds.n_items, ds.n_interactions) == (6, 6, 36)


def test_five_core_cascade():
    triples = [(f"u{u}", f"i{i}", i) for u in range(6) for i in range(6)]
    triples += [("u7", "i0", 100), ("u7", "i1", 101)]
    ds = five_core_filter(_log(triples))
    assert "u7" not in ds.user_ids
    assert ds.n_users == 6 and ds.n_items == 6


def test_five_core_empty_fixed_point():
    with pytest.raises(DataError, match="dataset eliminated by 5-core"):
        five_core_filter(_log([("u", "i", 0)]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 7)), min_size=1, max_size=250))
def test_five_core_matches_oracle_and_is_idempotent(pairs):
    triples = [(f"u{u}", f"i{i}", n) for n, (u, i) in enumerate(pairs)]
    expected = _core_oracle(triples)
    if not expected:
        with pytest.raises(DataError):
            five_core_filter(_log(triples))
        return
    ds = five_core_filter(_log(triples))
    assert ds.n_interactions == len(expected)
    assert ds.n_users == len({u for u, _, _ in expected})
    assert ds.n_items == len({i for _, i, _ in expected})
    again = five_core_filter(ds.to_log())
    assert again.n_interactions == ds.n_interactions
    for a, b in zip(ds.sequences, again.sequences):
        assert ds.decode_items(a) == again.decode_items(b)


def test_sequences_sorted_by_time_stably():
    triples = [("u", f"i{k}", t) for k, t in enumerate([5, 1, 3, 1, 2])]
    ds = five_core_filter(_log(triples), k=1)
    assert ds.decode_items(ds.sequences[0]) == ["i1", "i3", "i4", "i2", "i0"]


def _ds(seqs):
    n = max(max(s) for s in seqs)
    return Dataset([f"u{k}" for k in range(len(seqs))], ["<pad>"] + [str(i) for i in range(1, n + 1)],
                   [np.asarray(s) for s in seqs])


def test_leave_one_out():
    sp = leave_one_out_split(_ds([[1, 2, 3, 4, 5], [1, 2, 3]]))
    assert sp.train[0].tolist() == [1, 2, 3] and sp.valid[0] == 4 and sp.test[0] == 5
    assert sp.train[1].tolist() == [1] and sp.valid[1] == 2 and sp.test[1] == 3
    assert sp.context(0, "test").tolist() == [1, 2, 3, 4]


def test_leave_one_out_too_short():
    with pytest.raises(DataError, match="u1"):
        leave_one_out_split(_ds([[1, 2, 3], [1, 2]]))


@given(st.lists(st.integers(1, 9), min_size=3, max_size=30))
def test_split_partition(seq):
    sp = leave_one_out_split(_ds([seq]))
    assert sp.train[0].tolist() + [sp.valid[0], sp.test[0]] == seq


def test_chunking_by_hand():
    a, b, c, d, e, f = 1, 2, 3, 4, 5, 6
    rows = chunk_rows(np.array([a, b, c, d, e, f]), 4)
    assert [r[0].tolist() for r in rows] == [[PAD, PAD, a, b], [c, d, e, f]]
    assert [r[1].tolist() for r in rows] == [[PAD, PAD, b, c], [d, e, f, PAD]]


def test_single_chunk_length_30():
    seq = np.arange(1, 31)
    ((items, targets, start),) = chunk_rows(seq, 50)
    assert start == 0 and np.sum(items == PAD) == 20
    assert np.sum(targets != PAD) == 29


@given(st.lists(st.integers(1, 20), min_size=1, max_size=40), st.integers(2, 9))
def test_chunks_cover_sequence(seq, L):
    rows = chunk_rows(np.array(seq), L)
    joined = np.concatenate([r[0][r[0] != PAD] for r in rows])
    assert joined.tolist() == seq
    assert len(rows[-1][0][rows[-1][0] != PAD]) == min(L, len(seq))
    for items, _, _ in rows:
        real = items != PAD
        # left padding: false...false true...true
        assert np.all(np.diff(real.astype(int)) >= 0)


def test_batches_and_history(toy_split):
    rows = build_rows(toy_split, 4)
    assert np.all(rows.attention_mask == (rows.item_ids != PAD))
    for r in range(len(rows)):
        u = rows.users[r]
        seq = toy_split.train[u]
        hist = rows.history[r]
        assert seq[:len(hist)].tolist() == hist.tolist()
    batches = list(make_batches(toy_split, 4, 7, shuffle_seed=3))
    assert sum(len(b) for b in batches) == len(rows)
    again = list(make_batches(toy_split, 4, 7, shuffle_seed=3))
    assert all(np.array_equal(x.item_ids, y.item_ids) for x, y in zip(batches, again))


def test_context_batch(toy_split):
    b = context_batch(toy_split, [0, 1], "test", 5)
    ctx = toy_split.context(0, "test")
    assert b.item_ids[0][b.attention_mask[0]].tolist() == ctx[-5:].tolist()


def test_cache_round_trip(tmp_path, toy_split):
    ds = toy_split.dataset
    save_dataset(ds, tmp_path / "c.jsonl", source={"sha256": "x"})
    back = load_dataset(tmp_path / "c.jsonl")
    assert back.user_ids == ds.user_ids and back.item_ids == ds.item_ids
    assert all(np.array_equal(a, b) for a, b in zip(back.sequences, ds.sequences))


def test_cache_wrong_format(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text('{"format": "other"}\n')
    with pytest.raises(DataError):
        load_dataset(p)


def test_encode_decode_bijection(toy_split):
    ds = toy_split.dataset
    raw = ds.item_ids[1:]
    assert ds.decode_items(ds.encode_items(raw)) == raw
