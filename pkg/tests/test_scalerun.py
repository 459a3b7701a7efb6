import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import crandn
from memolam.admm import AdmmConfig, reconstruct
from memolam.encoder import ProjectionEncoder
from memolam.geometry import Geometry
from memolam.memoclient import LocalBackend, MemoClient
from memolam.operators import get_operators
from memolam.phantom import make_phantom
from memolam.scalerun import ChunkFailure, ChunkRunner, assign, parallel_apply


def test_assign_examples():
    assert assign(8, 4).sizes() == (2, 2, 2, 2)
    assert assign(10, 4).sizes() == (3, 3, 2, 2)
    assert assign(5, 1).ranges == (range(0, 5),)
    assert assign(10, 4).owner(6) == 2
    with pytest.raises(ValueError):
        assign(3, 0)


@given(st.integers(0, 200), st.integers(1, 16))
def test_assign_partitions_balanced(n, w):
    a = assign(n, w)
    flat = [i for r in a.ranges for i in r]
    assert flat == list(range(n))
    assert max(a.sizes()) - min(a.sizes()) <= 1


def test_every_chunk_once_and_bitwise_across_workers():
    x = crandn(np.random.default_rng(0), (37, 6, 5))
    seen = []
    lock = threading.Lock()

    def kernel(slab):
        with lock:
            seen.append(slab[0, 0, 0])
        return np.fft.fft(slab, axis=1) * 1.5

    ref = parallel_apply("fu1d", kernel, x, axis=0, workers=1, extent=4)
    assert len(seen) == 10
    seen.clear()
    out = parallel_apply("fu1d", kernel, x, axis=0, workers=4, extent=4)
    assert len(seen) == 10 and len(set(seen)) == 10
    assert out.tobytes() == ref.tobytes()
    assert ref.tobytes() == (np.fft.fft(x, axis=1) * 1.5).tobytes()


def test_worker_failure_reports_chunk():
    def kernel(slab):
        if slab[0, 0] == 8:
            raise RuntimeError("boom")
        return slab

    x = np.arange(12.0).reshape(12, 1)
    with pytest.raises(ChunkFailure) as exc:
        parallel_apply("fu2d", kernel, x, axis=0, workers=3, extent=4)
    assert exc.value.chunk_index == 2 and exc.value.op_id == "fu2d"


def test_memoized_substitutions_are_audited():
    rng = np.random.default_rng(1)
    base = crandn(rng, (8, 4, 4))
    client = MemoClient(LocalBackend(), tau=0.9)
    runner = ChunkRunner(2, 4, client, ProjectionEncoder(), audit=True)
    kernel = lambda s: 2.0 * s  # noqa: E731
    runner.apply("fu1d", kernel, base, 0, lambda s: s)
    noisy = base + 0.01 * crandn(rng, base.shape)
    out = runner.apply("fu1d", kernel, noisy, 0, lambda s: s)
    runner.close()
    client.close()
    assert len(runner.audit_log) == 2
    for rec in runner.audit_log:
        assert rec.cs > 0.9 and rec.outcome == "cache_hit"
        assert rec.rel_err < 0.05
    assert np.linalg.norm(out - 2.0 * noisy) / np.linalg.norm(2.0 * noisy) < 0.05


def test_memoized_apply_requires_shapes():
    runner = ChunkRunner(1, 4, MemoClient(LocalBackend()), ProjectionEncoder())
    with pytest.raises(ValueError):
        runner.apply("fu1d", lambda s: s, np.ones((4, 2), complex), 0)
    runner.client.close()


def test_four_workers_equal_one_worker_reconstruction():
    g = Geometry.cube(32, n_theta=8)
    truth = make_phantom("blocks", g.volume_shape, seed=1)
    d = get_operators(g).forward(truth)
    cfg = AdmmConfig(n_outer=2, chunk_extent=8, deterministic=True)
    u1, _ = reconstruct(d, g, cfg)
    u4, _ = reconstruct(d, g, AdmmConfig(n_outer=2, chunk_extent=8, deterministic=True,
                                         workers=4))
    assert u4.tobytes() == u1.tobytes()
