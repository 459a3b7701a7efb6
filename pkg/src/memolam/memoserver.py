"""Memory-node service: a clustered ANN index over keys plus a value store.

Keys are indexed after scaling to unit length, so nearest-by-L2 ranking
coincides with highest cosine similarity.  A stored value is returned only
when the cosine similarity between the query and the best candidate
exceeds ``tau``.
"""

from __future__ import annotations

import itertools
import logging
import socketserver
import threading
from dataclasses import dataclass

import numpy as np

from . import protocol as P

logger = logging.getLogger(__name__)


# --- k-means ---------------------------------------------------------------

def index_train(keys: np.ndarray, nlist: int, seed: int = 0, n_iter: int = 20) -> np.ndarray:
    """k-means centroids (k-means++ seeding, ``n_iter`` Lloyd rounds).

    ``nlist`` is clamped to the number of keys.
    """
    x = np.asarray(keys, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("need a non-empty (n, dim) key array")
    k = max(1, min(int(nlist), len(x)))
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(len(x))]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centroids[c] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centroids[c]) ** 2, axis=1))
    for _ in range(n_iter):
        labels = _nearest(x, centroids)
        for c in range(k):
            members = x[labels == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
            else:
                # reseed an empty cluster on the point farthest from its centroid
                far = np.argmax(np.sum((x - centroids[labels]) ** 2, axis=1))
                centroids[c] = x[far]
    return centroids


def _nearest(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (np.sum(x * x, axis=1)[:, None] - 2.0 * x @ centroids.T
         + np.sum(centroids * centroids, axis=1)[None, :])
    return np.argmin(d, axis=1)


def _normalize(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.float64)
    norms = np.linalg.norm(keys, axis=1, keepdims=True)
    return np.divide(keys, norms, out=np.zeros_like(keys), where=norms > 0)


class _Posting:
    """Growable (key, id) list."""

    def __init__(self, dim: int):
        self.keys = np.empty((16, dim))
        self.ids = np.empty(16, dtype=np.int64)
        self.n = 0

    def extend(self, keys: np.ndarray, ids: np.ndarray):
        need = self.n + len(ids)
        if need > len(self.ids):
            cap = max(need, 2 * len(self.ids))
            self.keys = np.resize(self.keys, (cap, self.keys.shape[1]))
            self.ids = np.resize(self.ids, cap)
        self.keys[self.n:need] = keys
        self.ids[self.n:need] = ids
        self.n = need

    def view(self):
        return self.keys[:self.n], self.ids[:self.n]


class IvfIndex:
    """Inverted-file index with cosine acceptance.

    Until ``train_size`` keys have been inserted, queries scan every key.
    The centroids are then trained once on the first ``train_size`` keys and
    kept fixed; later keys join their nearest cluster.
    """

    def __init__(self, dim: int | None = None, nlist: int = 64, nprobe: int = 8,
                 train_size: int = 1024, seed: int = 0):
        self.dim = dim
        self.nlist = nlist
        self.nprobe = nprobe
        self.train_size = train_size
        self.seed = seed
        self.centroids: np.ndarray | None = None
        self._flat: _Posting | None = None
        self._lists: list[_Posting] = []
        self._next_id = 0
        self.size = 0

    @property
    def trained(self) -> bool:
        return self.centroids is not None

    def _check_dim(self, dim: int):
        if self.dim is None:
            self.dim = dim
        elif dim != self.dim:
            raise P.ProtocolError(P.ERR_DIM_MISMATCH, f"key_dim {dim} != index dim {self.dim}")

    def add(self, keys: np.ndarray, ids: np.ndarray | None = None) -> np.ndarray:
        keys = np.atleast_2d(np.asarray(keys))
        self._check_dim(keys.shape[1])
        unit = _normalize(keys)
        if ids is None:
            ids = np.arange(self._next_id, self._next_id + len(unit))
        ids = np.asarray(ids, dtype=np.int64)
        self._next_id = max(self._next_id, int(ids.max(initial=-1)) + 1)
        if self.trained:
            self._assign(unit, ids)
        else:
            if self._flat is None:
                self._flat = _Posting(self.dim)
            self._flat.extend(unit, ids)
            if self._flat.n >= self.train_size:
                self._train_from_flat()
        self.size += len(ids)
        return ids

    def _train_from_flat(self):
        keys, ids = self._flat.view()
        self.centroids = index_train(keys[:self.train_size], self.nlist, self.seed)
        self._lists = [_Posting(self.dim) for _ in range(len(self.centroids))]
        self._assign(keys.copy(), ids.copy())
        self._flat = None

    def _assign(self, unit: np.ndarray, ids: np.ndarray):
        labels = _nearest(unit, self.centroids)
        for c in np.unique(labels):
            sel = labels == c
            self._lists[c].extend(unit[sel], ids[sel])

    def train(self, keys: np.ndarray | None = None):
        """Force training now (on ``keys`` or on what has been inserted)."""
        if keys is not None:
            self._check_dim(np.asarray(keys).shape[1])
            self.centroids = index_train(_normalize(keys), self.nlist, self.seed)
            self._lists = [_Posting(self.dim) for _ in range(len(self.centroids))]
            if self._flat is not None:
                k, i = self._flat.view()
                self._assign(k.copy(), i.copy())
                self._flat = None
        elif self._flat is not None and self._flat.n:
            self._train_from_flat()

    def search(self, queries: np.ndarray, nprobe: int | None = None):
        """Best candidate per query: ``(ids, cs)``; ``id = -1`` when empty."""
        q = np.atleast_2d(np.asarray(queries))
        if self.dim is not None:
            self._check_dim(q.shape[1])
        unit = _normalize(q)
        out_ids = np.full(len(q), -1, dtype=np.int64)
        out_cs = np.zeros(len(q))
        if self.size == 0:
            return out_ids, out_cs
        nprobe = nprobe or self.nprobe
        if not self.trained:
            keys, ids = self._flat.view()
            for n, qv in enumerate(unit):
                out_ids[n], out_cs[n] = _best(keys, ids, qv)
            return out_ids, out_cs
        nprobe = min(nprobe, len(self.centroids))
        cd = -2.0 * unit @ self.centroids.T + np.sum(self.centroids ** 2, axis=1)[None, :]
        probes = np.argsort(cd, axis=1, kind="stable")[:, :nprobe]
        for n, qv in enumerate(unit):
            best_id, best_cs = -1, -np.inf
            for c in probes[n]:
                keys, ids = self._lists[c].view()
                if len(ids) == 0:
                    continue
                i, cs = _best(keys, ids, qv)
                if cs > best_cs or (cs == best_cs and i < best_id):
                    best_id, best_cs = i, cs
            if best_id >= 0:
                out_ids[n], out_cs[n] = best_id, best_cs
        return out_ids, out_cs

    def exact_search(self, queries: np.ndarray):
        """Brute-force scan over every stored key (reference path)."""
        q = _normalize(np.atleast_2d(np.asarray(queries)))
        parts = [self._flat] if self._flat is not None else self._lists
        keys = np.concatenate([p.view()[0] for p in parts]) if parts else np.empty((0, q.shape[1]))
        ids = np.concatenate([p.view()[1] for p in parts]) if parts else np.empty(0, np.int64)
        out_ids = np.full(len(q), -1, dtype=np.int64)
        out_cs = np.zeros(len(q))
        if len(ids):
            for n, qv in enumerate(q):
                out_ids[n], out_cs[n] = _best(keys, ids, qv)
        return out_ids, out_cs


def _best(keys: np.ndarray, ids: np.ndarray, q: np.ndarray):
    """Highest-cosine candidate; ties go to the smallest id.

    The row-wise reduction rounds each key the same way whatever the list
    size, so probing every cluster reproduces the flat scan bit for bit.
    """
    cs = np.sum(keys * q, axis=1)
    top = cs.max()
    cand = np.flatnonzero(cs == top)
    j = cand[np.argmin(ids[cand])]
    return int(ids[j]), float(top)


class ValueStore:
    """``value_id -> bytes`` with a monotone id allocator."""

    def __init__(self):
        self._values: dict[int, bytes] = {}
        self._ids = itertools.count()
        self._lock = threading.Lock()

    def put(self, value: bytes) -> int:
        with self._lock:
            vid = next(self._ids)
            self._values[vid] = bytes(value)
        return vid

    def get(self, vid: int) -> bytes:
        return self._values[vid]

    def __len__(self):
        return len(self._values)


class RWLock:
    """Many readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    def acquire_read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1

    def release_read(self):
        with self._cond:
            self._readers -= 1
            if not self._readers:
                self._cond.notify_all()

    def acquire_write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True

    def release_write(self):
        with self._cond:
            self._writer = False
            self._cond.notify_all()


@dataclass
class LookupResult:
    value: bytes | None
    cs: float


class MemoStore:
    """Index database plus value database behind a readers-writer lock."""

    def __init__(self, dim: int | None = None, nlist: int = 64, nprobe: int = 8,
                 train_size: int = 1024, seed: int = 0):
        self.index = IvfIndex(dim, nlist, nprobe, train_size, seed)
        self.values = ValueStore()
        self._lock = RWLock()

    def __len__(self):
        return self.index.size

    def query_batch(self, keys, tau: float, nprobe: int | None = None) -> list[LookupResult]:
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float32))
        if keys.size == 0:
            return []
        self._lock.acquire_read()
        try:
            ids, cs = self.index.search(keys, nprobe)
            out = []
            for vid, c in zip(ids, cs):
                if vid >= 0 and c > tau:
                    out.append(LookupResult(self.values.get(int(vid)), float(c)))
                else:
                    out.append(LookupResult(None, float(c) if vid >= 0 else 0.0))
            return out
        finally:
            self._lock.release_read()

    def insert_batch(self, entries) -> list[int]:
        """``entries`` is a sequence of ``(key, value_bytes)``; returns value ids."""
        if not entries:
            return []
        keys = np.stack([np.asarray(k, dtype=np.float32).ravel() for k, _ in entries])
        self._lock.acquire_write()
        try:
            self.index._check_dim(keys.shape[1])
            vids = [self.values.put(v) for _, v in entries]
            self.index.add(keys, np.asarray(vids))
            return vids
        finally:
            self._lock.release_write()


# --- request handling ---------------------------------------------------------

class MemoService:
    """Turns decoded requests into response messages."""

    def __init__(self, store: MemoStore, default_nprobe: int = 8):
        self.store = store
        self.default_nprobe = default_nprobe

    def handle(self, msg_type: int, payload: bytes):
        try:
            msg = P.decode_payload(msg_type, payload)
        except P.ProtocolError as exc:
            return P.Error(exc.code, str(exc))
        except (ValueError, OverflowError) as exc:
            return P.Error(P.ERR_MALFORMED, str(exc))
        try:
            if isinstance(msg, P.QueryBatch):
                return self._query(msg)
            if isinstance(msg, P.InsertBatch):
                dims = {k.size for k, _ in msg.entries}
                if len(dims) > 1:
                    return P.Error(P.ERR_DIM_MISMATCH, "keys of different dimensions in one batch")
                return P.InsertAck(self.store.insert_batch(msg.entries))
            if isinstance(msg, P.Ping):
                return P.Pong()
        except P.ProtocolError as exc:
            return P.Error(exc.code, str(exc))
        except MemoryError:
            return P.Error(P.ERR_OVERLOAD, "out of memory")
        return P.Error(P.ERR_MALFORMED, f"unexpected message type {msg_type} from client")

    def _query(self, msg: P.QueryBatch):
        if not msg.keys:
            return P.QueryResp([])
        dims = {k.size for _, k in msg.keys}
        if len(dims) > 1:
            return P.Error(P.ERR_DIM_MISMATCH, "keys of different dimensions in one batch")
        keys = np.stack([k for _, k in msg.keys])
        results = self.store.query_batch(keys, msg.tau, msg.nprobe or self.default_nprobe)
        return P.QueryResp([
            P.QueryResult(corr, r.value is not None, r.cs, r.value or b"")
            for (corr, _), r in zip(msg.keys, results)
        ])


def serve_stream(service: MemoService, rfile, wfile, max_payload: int = P.MAX_PAYLOAD) -> None:
    """Serve frames from ``rfile`` until EOF or an unrecoverable framing error.

    Malformed payloads get an ERROR frame and the connection stays open;
    bad magic, oversize lengths or truncation end the connection after an
    ERROR frame where one can still be sent.
    """
    while True:
        try:
            frame = P.read_frame(rfile, max_payload)
        except P.ProtocolError as exc:
            _send(wfile, P.Error(exc.code, str(exc)))
            return
        if frame is None:
            return
        reply = service.handle(*frame)
        if not _send(wfile, reply):
            return


def _send(wfile, msg) -> bool:
    try:
        wfile.write(P.encode(msg))
        wfile.flush()
        return True
    except (OSError, ValueError):
        return False


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        serve_stream(self.server.service, self.rfile, self.wfile, self.server.max_payload)


class MemoServer(socketserver.ThreadingTCPServer):
    """Threaded TCP server; one thread per client connection."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, store: MemoStore | None = None, default_nprobe: int = 8,
                 max_payload: int = P.MAX_PAYLOAD):
        self.service = MemoService(store or MemoStore(nprobe=default_nprobe), default_nprobe)
        self.max_payload = max_payload
        super().__init__(addr, _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True, name="memo-server")
        t.start()
        return t


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {addr!r}")
    return host, int(port)
