import io
import socket
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from memolam import protocol as P
from memolam.memoserver import (IvfIndex, MemoServer, MemoService, MemoStore, RWLock, ValueStore,
                                index_train, parse_addr, serve_stream)


def brute_best(keys, q):
    """Independent oracle: max cosine over raw keys, smallest index on ties."""
    kn = keys / np.linalg.norm(keys, axis=1, keepdims=True)
    cs = kn @ (q / np.linalg.norm(q))
    j = int(np.flatnonzero(cs == cs.max())[0])
    return j, cs[j]


def test_index_train_examples():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((50, 4))
    assert np.allclose(index_train(x, 1), x.mean(axis=0))
    blobs = np.concatenate([rng.normal(10, 0.1, (30, 2)), rng.normal(-10, 0.1, (30, 2))])
    c = index_train(blobs, 2, seed=3)
    assert sorted(np.round(c[:, 0]).astype(int).tolist()) == [-10, 10]
    assert np.array_equal(index_train(blobs, 2, seed=3), c)
    assert len(index_train(x[:3], 10)) == 3  # clamped


def test_store_examples():
    store = MemoStore()
    q = np.ones((2, 4), np.float32)
    assert [r.value for r in store.query_batch(q, 0.92)] == [None, None]
    ids = store.insert_batch([(np.array([1, 0, 0, 0], np.float32), b"a"),
                              (np.array([1, 0, 0, 0], np.float32), b"b")])
    assert ids == [0, 1] and len(store) == 2
    res = store.query_batch(np.array([[2, 0, 0, 0]], np.float32), 0.92)[0]
    assert res.value == b"a" and res.cs == pytest.approx(1.0)  # tie -> smallest id
    miss = store.query_batch(np.array([[1, 1, 0, 0]], np.float32), 0.92)[0]
    assert miss.value is None and miss.cs == pytest.approx(2 ** -0.5)
    with pytest.raises(P.ProtocolError):
        store.insert_batch([(np.ones(3, np.float32), b"c")])


def test_thousand_inserts_counted_and_trained():
    rng = np.random.default_rng(1)
    store = MemoStore(nlist=8, train_size=256)
    for start in range(0, 1000, 100):
        store.insert_batch([(rng.standard_normal(6).astype(np.float32), b"v")
                            for _ in range(100)])
    assert len(store) == 1000 and store.index.trained
    assert len(store.values) == 1000


@given(st.integers(0, 2**31), st.integers(1, 300), st.integers(1, 12))
def test_full_probe_equals_exact_scan(seed, n, nlist):
    rng = np.random.default_rng(seed)
    keys = rng.standard_normal((n, 5))
    idx = IvfIndex(nlist=nlist, train_size=min(n, 64))
    idx.add(keys)
    q = rng.standard_normal((7, 5))
    ids, cs = idx.search(q, nprobe=nlist)
    ex_ids, ex_cs = idx.exact_search(q)
    assert np.array_equal(ids, ex_ids) and np.array_equal(cs, ex_cs)
    for n_, qv in enumerate(q):
        j, c = brute_best(keys, qv)
        assert ids[n_] == j and cs[n_] == pytest.approx(c, abs=1e-12)


@given(st.integers(0, 2**31), st.floats(0.0, 0.99))
def test_no_false_hits(seed, tau):
    rng = np.random.default_rng(seed)
    keys = rng.standard_normal((80, 4)).astype(np.float32)
    store = MemoStore(nlist=4, nprobe=2, train_size=32)
    store.insert_batch([(k, k.tobytes()) for k in keys])
    q = rng.standard_normal((10, 4)).astype(np.float32)
    for qv, r in zip(q, store.query_batch(q, tau)):
        if r.value is not None:
            stored = np.frombuffer(r.value, np.float32).astype(np.float64)
            cs = stored @ qv / np.linalg.norm(stored) / np.linalg.norm(qv)
            assert cs > tau


def test_value_store_ids_monotone():
    vs = ValueStore()
    assert [vs.put(b"x") for _ in range(3)] == [0, 1, 2]
    assert vs.get(1) == b"x" and len(vs) == 3


def test_rwlock_writer_excludes_readers():
    lock = RWLock()
    lock.acquire_read()
    got = threading.Event()

    def writer():
        lock.acquire_write()
        got.set()
        lock.release_write()

    t = threading.Thread(target=writer)
    t.start()
    assert not got.wait(0.05)
    lock.release_read()
    assert got.wait(1.0)
    t.join()


def _serve(frames: bytes, service=None):
    out = io.BytesIO()
    serve_stream(service or MemoService(MemoStore()), io.BytesIO(frames), out)
    out.seek(0)
    replies = []
    while (f := P.read_frame(out)) is not None:
        replies.append(P.decode_payload(*f))
    return replies


def test_service_errors_keep_connection():
    key = np.ones(4, np.float32)
    frames = (P.encode(P.InsertBatch([(key, b"v")]))
              + P.encode(P.QueryBatch(0.5, 8, [(1, np.ones(3, np.float32))]))
              + b"MLR1\x01\x02\x00\x00\x00ab"
              + P.encode(P.InsertAck([1]))
              + P.encode(P.QueryBatch(0.5, 8, [(9, key)]))
              + P.encode(P.Ping()))
    r = _serve(frames)
    assert isinstance(r[0], P.InsertAck) and r[0].ids == [0]
    assert isinstance(r[1], P.Error) and r[1].code == P.ERR_DIM_MISMATCH
    assert isinstance(r[2], P.Error) and r[2].code == P.ERR_MALFORMED
    assert isinstance(r[3], P.Error)  # server never accepts ACKs
    assert r[4] == P.QueryResp([P.QueryResult(9, True, 1.0, b"v")])
    assert isinstance(r[5], P.Pong)


def test_bad_magic_closes_after_error():
    r = _serve(b"JUNKxxxxx" + P.encode(P.Ping()))
    assert len(r) == 1 and isinstance(r[0], P.Error)


def test_tcp_server_roundtrip():
    server = MemoServer(("127.0.0.1", 0))
    server.start_background()
    try:
        host, port = parse_addr(server.address)
        with socket.create_connection((host, port), timeout=2) as s:
            f = s.makefile("rwb")
            f.write(P.encode(P.Ping()))
            f.flush()
            assert P.read_frame(f) == (P.PONG, b"")
    finally:
        server.shutdown()
        server.server_close()


def test_parse_addr():
    assert parse_addr("localhost:7000") == ("localhost", 7000)
    with pytest.raises(ValueError):
        parse_addr("7000")
