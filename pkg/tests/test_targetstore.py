import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from ssl_am.errors import DataError, NotFoundError, StoreFormatError
from ssl_am.nncore import ModelParams, ModelSpec, forward, softmax
from ssl_am.targetstore import (DEFAULT_FILL, StoreWriter, TargetStore, TopKTargetRecord, generate_targets,
                                merge_stores, read_store, reconstruct, reconstruct_batch, select_topk,
                                select_topk_batch, soft_targets, store_size, write_store)


@given(arrays(np.float32, st.integers(1, 60), elements=st.floats(-8, 8, width=32)), st.integers(1, 25))
def test_topk_matches_reference(z, k):
    rec = select_topk(z, k)
    assert rec.indices.tolist() == oracles.topk_indices(z.tolist(), k)
    np.testing.assert_array_equal(rec.values, z[rec.indices])


def test_topk_ties_go_to_lower_index():
    z = np.array([1.0, 3.0, 3.0, 3.0, 0.0])
    assert select_topk(z, 2).indices.tolist() == [1, 2]


def test_topk_k_larger_than_d():
    idx, val = select_topk_batch(np.array([[0.5, -1.0, 2.0]]), 20)
    assert idx.tolist() == [[0, 1, 2]] and idx.dtype == np.uint16 and val.dtype == np.float32


def test_record_requires_ascending_indices():
    with pytest.raises(DataError):
        TopKTargetRecord(np.array([3, 1], np.uint16), np.zeros(2, np.float32))


def test_reconstruct_fills_missing():
    rec = TopKTargetRecord(np.array([1, 4], np.uint16), np.array([2.0, -0.5], np.float32))
    out = reconstruct(rec, 6)
    np.testing.assert_array_equal(out, [DEFAULT_FILL, 2.0, DEFAULT_FILL, DEFAULT_FILL, -0.5, DEFAULT_FILL])
    with pytest.raises(DataError):
        reconstruct(rec, 4)


@given(arrays(np.float32, st.integers(2, 80), elements=st.floats(-10, 10, width=32)), st.integers(1, 30))
def test_reconstructed_posterior_within_tail_mass(z, k):
    # teacher logits are float32, so storing them loses nothing
    idx, val = select_topk_batch(z, k)
    p = oracles.softmax64(z)
    q = oracles.softmax64(reconstruct_batch(idx, val, z.size, dtype=np.float64)[0])
    tail = 1.0 - p[idx[0].astype(int)].sum()
    assert oracles.total_variation(p, q) <= tail + 1e-12
    assert q.argmax() == p.argmax()


def test_soft_targets_are_distributions(rng):
    idx, val = select_topk_batch(rng.normal(size=(5, 40)), 20)
    q = soft_targets(idx, val, 40)
    np.testing.assert_allclose(q.sum(axis=1), 1.0, rtol=1e-6)
    assert np.all(q[:, np.setdiff1d(np.arange(40), idx[0])][0] == 0)


def test_generate_targets_uses_teacher_logits(rng):
    teacher = ModelParams.init(ModelSpec(3, (4,), 30, True), 0)
    x = rng.normal(size=(6, 3)).astype(np.float32)
    idx, val = generate_targets(teacher, x, 5)
    z = forward(teacher, x)
    for t in range(6):
        assert idx[t].tolist() == oracles.topk_indices(z[t].tolist(), 5)


def _records(rng, n, d=50, k=20, max_t=30):
    out = []
    for i in range(n):
        t = int(rng.integers(0, max_t))
        idx, val = select_topk_batch(rng.normal(size=(t, d)).astype(np.float32), k) if t else (
            np.zeros((0, k), np.uint16), np.zeros((0, k), np.float32))
        out.append((f"utt-{i:03d}", idx, val))
    return out


def test_store_round_trip_and_size(tmp_path, rng):
    recs = _records(rng, 12)
    path = tmp_path / "t.store"
    write_store(path, recs, 50, 20)
    sizes = {u: idx.shape[0] for u, idx, _ in recs}
    assert path.stat().st_size == store_size(sizes, 20) == oracles.store_bytes(sizes, 20)
    with TargetStore(path) as store:
        assert (store.num_outputs, store.k, len(store)) == (50, 20, 12)
        assert store.ids() == [u for u, _, _ in recs]
        for uid, idx, val in recs:
            got_i, got_v = store.read(uid)
            assert got_i.tobytes() == idx.tobytes() and got_v.tobytes() == val.tobytes()
        assert "utt-005" in store and "nope" not in store
        with pytest.raises(NotFoundError):
            store.read("nope")
    i, _ = read_store(path, "utt-003")
    assert i.shape == (recs[3][1].shape[0], 20)


def test_empty_store(tmp_path):
    path = tmp_path / "e.store"
    write_store(path, [], 10, 3)
    assert path.stat().st_size == store_size({}, 3)
    with TargetStore(path) as store:
        assert len(store) == 0 and list(store) == []


def test_writer_rejects_bad_records(tmp_path):
    with StoreWriter(tmp_path / "w.store", 10, 2) as w:
        w.write("a", np.array([[0, 1]], np.uint16), np.zeros((1, 2), np.float32))
        with pytest.raises(DataError):
            w.write("a", np.array([[0, 1]], np.uint16), np.zeros((1, 2), np.float32))
        with pytest.raises(DataError):
            w.write("b", np.array([[0, 1, 2]], np.uint16), np.zeros((1, 3), np.float32))
        with pytest.raises(DataError):
            w.write("c", np.array([[0, 10]], np.uint16), np.zeros((1, 2), np.float32))
    with pytest.raises(ValueError):
        StoreWriter(tmp_path / "x.store", 10, 11)


def test_reader_detects_corruption(tmp_path, rng):
    path = tmp_path / "t.store"
    write_store(path, _records(rng, 3), 50, 20)
    data = path.read_bytes()
    for bad in (data[:-1], data[:-20], b"XXXX" + data[4:], data[:10]):
        path.write_bytes(bad)
        with pytest.raises(StoreFormatError):
            TargetStore(path)


def test_merge_stores(tmp_path, rng):
    recs = _records(rng, 9)
    parts = [recs[:4], recs[4:]]
    paths = []
    for i, part in enumerate(parts):
        paths.append(tmp_path / f"p{i}.store")
        write_store(paths[-1], part, 50, 20)
    merge_stores(paths, tmp_path / "all.store")
    write_store(tmp_path / "direct.store", recs, 50, 20)
    assert (tmp_path / "all.store").read_bytes() == (tmp_path / "direct.store").read_bytes()
    with pytest.raises(DataError):
        merge_stores([paths[0], paths[0]], tmp_path / "dup.store")


@given(st.lists(st.tuples(st.text(min_size=1, max_size=12), st.integers(0, 8)), max_size=8, unique_by=lambda r: r[0]),
       st.integers(1, 6))
def test_store_round_trip_property(tmp_path_factory, entries, k):
    rng = np.random.default_rng(len(entries))
    d = 16
    recs = []
    for uid, t in entries:
        idx, val = select_topk_batch(rng.normal(size=(max(t, 1), d)), k)
        recs.append((uid, idx[:t], val[:t]))
    path = tmp_path_factory.mktemp("prop") / "s.store"
    write_store(path, recs, d, k)
    assert path.stat().st_size == oracles.store_bytes({u: i.shape[0] for u, i, _ in recs}, k)
    with TargetStore(path) as store:
        for uid, idx, val in recs:
            got_i, got_v = store.read(uid)
            assert np.array_equal(got_i, idx) and got_v.tobytes() == val.tobytes()


def test_teacher_posterior_close_to_full(rng):
    z = rng.normal(size=(50, 200)) * 6
    idx, val = select_topk_batch(z, 20)
    p = softmax(z)
    q = soft_targets(idx, val, 200, dtype=np.float64)
    assert np.all(p.argmax(1) == q.argmax(1))
