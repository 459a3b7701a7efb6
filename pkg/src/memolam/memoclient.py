"""Compute-node side of memoization.

A lookup first checks the private cache: one slot per (chunk location,
operator), so a lookup costs exactly one similarity comparison.  The remote
store is checked next.  A hit is accepted only when the cosine similarity
between keys exceeds ``tau``.  Misses are computed by the caller and
inserted asynchronously.
"""

from __future__ import annotations

import logging
import os
import queue
import socket
import struct
import threading
import warnings
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import protocol as P
from .encoder import MemoKey
from .memoserver import MemoStore, parse_addr

logger = logging.getLogger(__name__)

ENV_ADDR = "MLR_MEMO_ADDR"
DEFAULT_TAU = 0.92
DEFAULT_TIMEOUT = 0.1  # seconds
FLUSH_BYTES = 4096


def cosine_similarity(a, b) -> float:
    """Cosine similarity of two key vectors; 0.0 when either has zero norm."""
    va = np.asarray(a.vector if isinstance(a, MemoKey) else a, dtype=np.float64).ravel()
    vb = np.asarray(b.vector if isinstance(b, MemoKey) else b, dtype=np.float64).ravel()
    if va.shape != vb.shape:
        raise ValueError(f"key dims differ: {va.size} vs {vb.size}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        return 0.0
    if np.array_equal(va, vb):
        return 1.0
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


class Outcome(str, Enum):
    CACHE_HIT = "cache_hit"
    REMOTE_HIT = "remote_hit"
    MISS = "miss"


@dataclass
class MemoDecision:
    outcome: Outcome
    similarity: float
    value: np.ndarray | None = None

    @property
    def hit(self) -> bool:
        return self.outcome is not Outcome.MISS


_NORM = struct.Struct("<d")


def encode_value(arr: np.ndarray, input_norm: float = float("nan")) -> bytes:
    """Stored record: the input chunk's norm (f64) followed by the output (c16)."""
    return _NORM.pack(input_norm) + np.ascontiguousarray(arr, dtype="<c16").tobytes()


def decode_value(raw: bytes, shape):
    """``(input_norm, array)``, or ``None`` when the size does not fit ``shape``.

    With ``shape=None`` any whole number of values is accepted (flat result).
    """
    if shape is None:
        if len(raw) < _NORM.size or (len(raw) - _NORM.size) % 16:
            return None
        shape = ((len(raw) - _NORM.size) // 16,)
    if len(raw) != _NORM.size + 16 * int(np.prod(shape)):
        return None
    (norm,) = _NORM.unpack_from(raw)
    arr = np.frombuffer(raw, dtype="<c16", offset=_NORM.size).reshape(shape)
    return norm, arr.astype(np.complex128)


# --- caches -------------------------------------------------------------------

@dataclass
class _Slot:
    key: np.ndarray
    value: np.ndarray
    input_norm: float = float("nan")


class PrivateCache:
    """One slot per (location, operator); a new value always replaces the old.

    In ``global`` mode a lookup compares against every stored slot of the
    same operator regardless of location, which is the comparison baseline
    for the one-slot design.
    """

    def __init__(self, mode: str = "private"):
        if mode not in ("private", "global"):
            raise ValueError("cache mode must be 'private' or 'global'")
        self.mode = mode
        self._slots: dict[tuple, _Slot] = {}
        self._lock = threading.Lock()
        self.comparisons = 0
        self.lookups = 0

    def __len__(self):
        return len(self._slots)

    def put(self, location, op_id: str, key: np.ndarray, value: np.ndarray,
            input_norm: float = float("nan")) -> None:
        with self._lock:
            self._slots[(location, op_id)] = _Slot(np.array(key, dtype=np.float32), value,
                                                   input_norm)

    def get(self, location, op_id: str):
        slot = self._slots.get((location, op_id))
        return None if slot is None else (slot.key, slot.value)

    def lookup(self, key: np.ndarray, location, op_id: str, tau: float):
        """Return ``(cs, slot)`` of the best comparable slot; ``slot`` is
        ``None`` unless ``cs > tau``."""
        with self._lock:
            self.lookups += 1
            if self.mode == "private":
                slot = self._slots.get((location, op_id))
                candidates = [] if slot is None else [slot]
            else:
                candidates = [s for (loc, op), s in self._slots.items() if op == op_id]
            best_cs, best = 0.0, None
            for slot in candidates:
                self.comparisons += 1
                cs = cosine_similarity(key, slot.key)
                if best is None or cs > best_cs:
                    best_cs, best = cs, slot
            if best is not None and best_cs > tau:
                return best_cs, best
            return best_cs, None


# --- coalescing -----------------------------------------------------------------

@dataclass
class PendingKey:
    corr_id: int
    vector: np.ndarray
    group: object  # chunk location; keys of one group with different ops are dependent
    op_id: str


@dataclass
class Batch:
    items: list
    nbytes: int
    barrier: bool


class CoalesceBuffer:
    """Accumulate query keys until their payload reaches ``threshold`` bytes.

    Adding a key that depends on a pending one (same chunk location,
    different operator) first flushes the pending keys as a barrier batch.
    """

    def __init__(self, threshold: int = FLUSH_BYTES):
        self.threshold = threshold
        self._pending: list[PendingKey] = []
        self._nbytes = 0
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._pending)

    @property
    def nbytes(self) -> int:
        return self._nbytes

    def add(self, item: PendingKey) -> list[Batch]:
        out = []
        with self._lock:
            if any(p.group == item.group and p.op_id != item.op_id for p in self._pending):
                out.append(self._take(barrier=True))
            self._pending.append(item)
            self._nbytes += P.QueryBatch.key_bytes(item.vector.size)
            if self._nbytes >= self.threshold:
                out.append(self._take(barrier=False))
        return out

    def flush(self) -> list[Batch]:
        """Barrier flush of whatever is pending (possibly nothing)."""
        with self._lock:
            return [self._take(barrier=True)] if self._pending else []

    def _take(self, barrier: bool) -> Batch:
        batch = Batch(self._pending, self._nbytes, barrier)
        self._pending, self._nbytes = [], 0
        return batch


def coalesce_and_flush(items, threshold: int = FLUSH_BYTES) -> list[Batch]:
    """Run ``items`` through a fresh buffer and end with a barrier flush."""
    buf = CoalesceBuffer(threshold)
    batches = []
    for it in items:
        batches.extend(buf.add(it))
    batches.extend(buf.flush())
    return batches


def demultiplex(batches_and_results) -> dict:
    """Map correlation id to result; a repeated id is an error."""
    out = {}
    for result in batches_and_results:
        if result.corr_id in out:
            raise ValueError(f"correlation id {result.corr_id} answered twice")
        out[result.corr_id] = result
    return out


# --- backends -------------------------------------------------------------------

class LocalBackend:
    """In-process store; no serialization."""

    def __init__(self, store: MemoStore | None = None, nprobe: int = 8):
        self.store = store or MemoStore(nprobe=nprobe)
        self.nprobe = nprobe

    def query(self, items: list[PendingKey], tau: float) -> list[P.QueryResult]:
        keys = np.stack([it.vector for it in items])
        res = self.store.query_batch(keys, tau, self.nprobe)
        return [P.QueryResult(it.corr_id, r.value is not None, r.cs, r.value or b"")
                for it, r in zip(items, res)]

    def insert(self, entries) -> list[int]:
        return self.store.insert_batch(entries)

    def close(self):
        pass


class TcpBackend:
    """Speaks the binary protocol; queries and inserts use separate sockets."""

    def __init__(self, addr: str, timeout: float = DEFAULT_TIMEOUT, nprobe: int = 8):
        self.addr = parse_addr(addr)
        self.timeout = timeout
        self.nprobe = nprobe
        self._query_sock = None
        self._insert_sock = None
        self._qlock = threading.Lock()
        self._ilock = threading.Lock()

    def _connect(self, timeout):
        sock = socket.create_connection(self.addr, timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock

    def _roundtrip(self, sock_attr: str, msg, timeout):
        sock = getattr(self, sock_attr)
        if sock is None:
            sock = self._connect(timeout)
            setattr(self, sock_attr, sock)
        sock.settimeout(timeout)
        try:
            sock.sendall(P.encode(msg))
            frame = P.read_frame(sock.makefile("rb"))
        except (OSError, P.ProtocolError):
            # the stream may hold a late reply now, so start over next time
            sock.close()
            setattr(self, sock_attr, None)
            raise
        if frame is None:
            sock.close()
            setattr(self, sock_attr, None)
            raise ConnectionError("memo server closed the connection")
        reply = P.decode_payload(*frame)
        if isinstance(reply, P.Error):
            raise P.ProtocolError(reply.code, reply.message)
        return reply

    def query(self, items: list[PendingKey], tau: float) -> list[P.QueryResult]:
        msg = P.QueryBatch(tau, self.nprobe, [(it.corr_id, it.vector) for it in items])
        with self._qlock:
            reply = self._roundtrip("_query_sock", msg, self.timeout)
        return reply.results

    def insert(self, entries) -> list[int]:
        # inserts run off the critical path, so they get a longer deadline
        with self._ilock:
            reply = self._roundtrip("_insert_sock", P.InsertBatch(entries), max(self.timeout, 5.0))
        return reply.ids

    def ping(self) -> bool:
        with self._qlock:
            return isinstance(self._roundtrip("_query_sock", P.Ping(), self.timeout), P.Pong)

    def close(self):
        for attr in ("_query_sock", "_insert_sock"):
            s = getattr(self, attr)
            if s is not None:
                s.close()
                setattr(self, attr, None)


def backend_from_env(mode: str, nprobe: int = 8, timeout: float = DEFAULT_TIMEOUT):
    """``local`` gives an in-process store; ``distributed`` uses ``MLR_MEMO_ADDR``."""
    if mode == "distributed":
        addr = os.environ.get(ENV_ADDR)
        if addr:
            return TcpBackend(addr, timeout, nprobe)
        warnings.warn(f"{ENV_ADDR} is not set; using an in-process memo store", RuntimeWarning)
    return LocalBackend(nprobe=nprobe)


# --- client -----------------------------------------------------------------------

@dataclass
class MemoStats:
    counts: Counter = field(default_factory=Counter)

    def __getitem__(self, name):
        return self.counts[name]


class MemoClient:
    """Thread-safe memoization client.

    ``lookup_many`` checks the private cache for every key, coalesces the
    remaining keys into query batches, and returns one decision per key in
    input order.  ``insert_async`` writes the value into the private cache
    and queues it for the remote store; when the queue is full the remote
    insert is dropped and counted.

    Each stored value carries the norm of the chunk it was computed from.
    With ``rescale`` on, a retrieved value is multiplied by
    ``||query chunk|| / ||stored chunk||``: cosine similarity ignores
    magnitude, and the memoized operators are linear.
    """

    def __init__(self, backend=None, tau: float = DEFAULT_TAU, cache_mode: str = "private",
                 flush_bytes: int = FLUSH_BYTES, queue_capacity: int = 256,
                 start_worker: bool = True, rescale: bool = True):
        if not 0.0 < tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        self.backend = backend if backend is not None else LocalBackend()
        self.tau = tau
        self.rescale = rescale
        self.cache = PrivateCache(cache_mode)
        self.flush_bytes = flush_bytes
        self._queue: queue.Queue = queue.Queue(maxsize=queue_capacity)
        self._counts = Counter()
        self._count_lock = threading.Lock()
        self._corr = 0
        self._corr_lock = threading.Lock()
        self.batches: list[Batch] = []  # sent query batches, kept for inspection
        self._worker = None
        if start_worker:
            self._worker = threading.Thread(target=self._insert_loop, daemon=True,
                                            name="memo-insert")
            self._worker.start()

    # counters ------------------------------------------------------------------
    def _bump(self, name: str, n: int = 1):
        with self._count_lock:
            self._counts[name] += n

    def stats(self) -> dict:
        with self._count_lock:
            out = dict(self._counts)
        out["comparisons"] = self.cache.comparisons
        out["cache_lookups"] = self.cache.lookups
        for k in ("miss", "remote_hit", "cache_hit", "timeouts", "dropped", "inserted",
                  "remote_errors"):
            out.setdefault(k, 0)
        return out

    def _next_corr(self) -> int:
        with self._corr_lock:
            self._corr = (self._corr + 1) & 0xFFFFFFFF
            return self._corr

    # lookups -------------------------------------------------------------------
    def lookup(self, key: MemoKey, out_shape=None, tau: float | None = None) -> MemoDecision:
        return self.lookup_many([key], [out_shape], tau)[0]

    def lookup_many(self, keys: list[MemoKey], out_shapes=None,
                    tau: float | None = None) -> list[MemoDecision]:
        """One decision per key, in input order.

        ``out_shapes[i]`` is the expected output shape for key ``i``; a stored
        value of another size counts as a miss.
        """
        tau = self.tau if tau is None else tau
        out_shapes = out_shapes or [None] * len(keys)
        decisions: list[MemoDecision | None] = [None] * len(keys)
        remote = []
        for n, (key, shape) in enumerate(zip(keys, out_shapes)):
            cs, slot = self.cache.lookup(key.vector, key.location, key.op_id, tau)
            if slot is not None and (shape is None or slot.value.shape == tuple(shape)):
                value = self._rescale(slot.value, key.input_norm, slot.input_norm)
                decisions[n] = MemoDecision(Outcome.CACHE_HIT, cs, value)
            elif key.norm == 0.0:
                decisions[n] = MemoDecision(Outcome.MISS, 0.0)
            else:
                remote.append((n, PendingKey(self._next_corr(), key.vector, key.location,
                                             key.op_id)))
        if remote:
            results = self._query_remote([pk for _, pk in remote], tau)
            for n, pk in remote:
                r = results.get(pk.corr_id)
                key, shape = keys[n], out_shapes[n]
                stored = None
                if r is not None and r.hit and r.cs > tau:
                    stored = decode_value(r.value, shape)
                if stored is None:
                    decisions[n] = MemoDecision(Outcome.MISS, 0.0 if r is None else r.cs)
                    continue
                stored_norm, value = stored
                self.cache.put(key.location, key.op_id, key.vector, value, stored_norm)
                decisions[n] = MemoDecision(Outcome.REMOTE_HIT, r.cs,
                                            self._rescale(value, key.input_norm, stored_norm))
        for d in decisions:
            self._bump(d.outcome.value)
        return decisions

    def _rescale(self, value: np.ndarray, query_norm: float, stored_norm: float) -> np.ndarray:
        # the memoized operators are linear, so the output scales with the input
        if not self.rescale or not (stored_norm > 0) or not np.isfinite(query_norm):
            return value
        if query_norm == stored_norm:
            return value
        return value * (query_norm / stored_norm)

    def _query_remote(self, items: list[PendingKey], tau: float) -> dict:
        buf = CoalesceBuffer(self.flush_bytes)
        batches = []
        for it in items:
            batches.extend(buf.add(it))
        batches.extend(buf.flush())
        results = {}
        for batch in batches:
            self.batches.append(batch)
            try:
                answered = self.backend.query(batch.items, tau)
            except (socket.timeout, TimeoutError):
                self._bump("timeouts")
                continue
            except (OSError, P.ProtocolError) as exc:
                logger.warning("memo query failed: %s", exc)
                self._bump("remote_errors")
                continue
            results.update(demultiplex(answered))
        return results

    # insertion -------------------------------------------------------------------
    def insert_async(self, key: MemoKey, value: np.ndarray) -> bool:
        """Install ``value`` in the cache slot and queue a remote insert.

        Returns ``False`` when the queue was full and the remote insert dropped.
        """
        value = np.asarray(value)
        self.cache.put(key.location, key.op_id, key.vector, value, key.input_norm)
        if key.norm == 0.0:
            return True
        record = encode_value(value, key.input_norm)
        try:
            self._queue.put_nowait((np.array(key.vector, dtype=np.float32), record))
        except queue.Full:
            self._bump("dropped")
            return False
        return True

    def _insert_loop(self):
        while True:
            item = self._queue.get()
            if item is None:
                self._queue.task_done()
                return
            batch = [item]
            # drain whatever else is waiting into the same batch
            while len(batch) < 64:
                try:
                    nxt = self._queue.get_nowait()
                except queue.Empty:
                    break
                if nxt is None:
                    self._queue.put(None)
                    self._queue.task_done()
                    break
                batch.append(nxt)
            try:
                self.backend.insert(batch)
                self._bump("inserted", len(batch))
            except (OSError, P.ProtocolError) as exc:
                logger.warning("memo insert failed: %s", exc)
                self._bump("remote_errors")
            finally:
                for _ in batch:
                    self._queue.task_done()

    def drain(self) -> None:
        """Block until every queued insert has been processed."""
        if self._worker is not None:
            self._queue.join()

    def close(self) -> None:
        if self._worker is not None:
            self.drain()
            self._queue.put(None)
            self._worker.join(timeout=5)
            self._worker = None
        self.backend.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
