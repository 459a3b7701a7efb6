"""ADMM reconstruction with total-variation regularization.

The problem is ``min_u 1/2 ||L u - d||^2 + alpha * TV(u)`` with the split
``psi = grad u``.  One outer iteration runs four phases:

LSP
    ``n_inner`` conjugate-gradient steps on
    ``1/2 ||L u - d||^2 + rho/2 ||grad u - g||^2`` with ``g = psi - lam/rho``.
    The gradient is ``G = L*(L u - d) - rho * div(grad u - g)``.
RSP
    isotropic shrinkage of ``z = grad u + lam/rho`` by ``alpha/rho``.
multiplier
    ``lam += rho * (grad u - psi)``.
penalty
    residual balancing: ``rho`` doubles when ``r > 10 s`` and halves when
    ``s > 10 r``, where ``r = ||grad u - psi||`` and ``s = rho ||psi - psi_prev||``.

CG uses the Dai-Yuan direction
``beta = ||G||^2 / Re<p_prev, G - G_prev>`` (zero on the first step or a
non-positive denominator) and the exact step along ``p`` for the quadratic,
``gamma = -Re<G, p> / (||L p||^2 + rho ||grad p||^2)``.

Two pipelines evaluate the data term.  ``baseline`` runs the six transforms
``F2D* Fu2D Fu1D`` forward and ``Fu1D* Fu2D* F2D`` back.  ``optimized`` keeps
the data in the frequency domain (``d_hat = F2D d`` once), drops the
``F2D``/``F2D*`` pair and subtracts ``d_hat`` from the ``Fu2D`` output, so
four transforms remain.  Only those transform calls are memoized; the step
length and the reported objective always use exact operators.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .encoder import EncoderConfig, make_encoder
from .geometry import DEFAULT_CHUNK_EXTENT, Geometry, ProjectionSet, Volume
from .memoclient import DEFAULT_TAU, MemoClient, backend_from_env
from .operators import CHUNK_AXIS, LaminoOperators, div, get_operators, grad
from .scalerun import ChunkRunner

logger = logging.getLogger(__name__)

PIPELINES = ("baseline", "optimized")
MEMO_MODES = ("off", "local", "distributed")


class DivergenceError(RuntimeError):
    """Raised when the inner loss grows by ``divergence_factor`` over 3 steps."""


@dataclass
class AdmmConfig:
    alpha: float = 1e-3
    rho0: float = 1.0
    n_inner: int = 4
    n_outer: int = 60
    tau: float = DEFAULT_TAU
    pipeline: str = "optimized"
    memoization: str = "off"
    freeze_rho: bool = False
    nufft: str = "direct"
    chunk_extent: int = DEFAULT_CHUNK_EXTENT
    workers: int = 1
    deterministic: bool = True
    cache_mode: str = "private"
    divergence_factor: float = 10.0
    rescale_hits: bool = True
    memo_start: int = 0  # first outer iteration that uses memoization
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.rho0 <= 0:
            raise ValueError("rho0 must be > 0")
        if self.n_inner < 1 or self.n_outer < 0:
            raise ValueError("n_inner must be >= 1 and n_outer >= 0")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.pipeline not in PIPELINES:
            raise ValueError(f"pipeline must be one of {PIPELINES}")
        if self.memoization not in MEMO_MODES:
            raise ValueError(f"memoization must be one of {MEMO_MODES}")


@dataclass
class AdmmState:
    u: np.ndarray
    psi: np.ndarray
    lam: np.ndarray
    rho: float
    g: np.ndarray
    g_prev: np.ndarray
    G: np.ndarray
    G_prev: np.ndarray
    r: float = 0.0
    s: float = 0.0
    iteration: int = 0
    p: np.ndarray | None = None
    inner_losses: deque = field(default_factory=lambda: deque(maxlen=4))
    stagnated: int = 0

    @classmethod
    def initial(cls, geom: Geometry, rho0: float, u0: np.ndarray | None = None) -> "AdmmState":
        shape = geom.volume_shape
        u = np.zeros(shape, np.complex128) if u0 is None else np.array(u0, dtype=np.complex128)
        if u.shape != shape:
            raise ValueError(f"initial volume shape {u.shape} != {shape}")
        zg = np.zeros((3,) + shape, np.complex128)
        return cls(u, zg.copy(), zg.copy(), float(rho0), zg.copy(), zg.copy(),
                   np.zeros(shape, np.complex128), np.zeros(shape, np.complex128))


# --- metrics --------------------------------------------------------------------

def _vdot(a, b) -> float:
    return float(np.vdot(a, b).real)


def tv_norm(u) -> float:
    """Isotropic total variation: sum over voxels of the gradient magnitude."""
    g = grad(u)
    return float(np.sum(np.sqrt(np.sum(np.abs(g) ** 2, axis=0))))


def objective(u, d, ops: LaminoOperators, alpha: float) -> float:
    """``1/2 ||L u - d||^2 + alpha * TV(u)`` with exact operators."""
    res = ops.forward(u) - d
    return 0.5 * _vdot(res, res) + alpha * tv_norm(u)


def lsp_objective(u, d, g, rho: float, ops: LaminoOperators) -> float:
    res = ops.forward(u) - d
    dg = grad(u) - g
    return 0.5 * _vdot(res, res) + 0.5 * rho * _vdot(dg, dg)


def accuracy(r_comp, r_lb) -> tuple[float, float]:
    """``E = ||r_comp - r_lb|| / ||r_comp||`` and ``1 - E``.

    The denominator uses the first argument, so the metric is not symmetric.
    """
    a = r_comp.data if isinstance(r_comp, Volume) else np.asarray(r_comp)
    b = r_lb.data if isinstance(r_lb, Volume) else np.asarray(r_lb)
    den = np.linalg.norm(a)
    if den == 0:
        raise ValueError("reference reconstruction has zero norm")
    e = float(np.linalg.norm(a - b) / den)
    return e, 1.0 - e


# --- LSP ------------------------------------------------------------------------

def _shape_fns(geom: Geometry) -> dict[str, Callable]:
    g = geom
    return {
        "fu1d": lambda s: (s[0], g.h, g.n2),
        "fu1d_adj": lambda s: (s[0], g.n0, g.n2),
        "fu2d": lambda s: (g.n_theta, s[1], g.w),
        "fu2d_adj": lambda s: (g.n1, s[1], g.n2),
        "f2d": lambda s: s,
        "f2d_adj": lambda s: s,
    }


class OperatorPipeline:
    """Evaluates the data-term gradient chunk by chunk, optionally memoized."""

    def __init__(self, geom: Geometry, cfg: AdmmConfig, runner: ChunkRunner | None = None):
        self.geom = geom
        self.ops = get_operators(geom, cfg.nufft)
        self.runner = runner or ChunkRunner(cfg.workers, cfg.chunk_extent,
                                            deterministic=cfg.deterministic)
        self._shapes = _shape_fns(geom)
        self._kernels = {
            "fu1d": self.ops.fu1d, "fu1d_adj": self.ops.fu1d_adj,
            "fu2d": self.ops.fu2d, "fu2d_adj": self.ops.fu2d_adj,
            "f2d": self.ops.f2d, "f2d_adj": self.ops.f2d_adj,
        }

    def call(self, op_id: str, x: np.ndarray, iteration: int = 0) -> np.ndarray:
        return self.runner.apply(op_id, self._kernels[op_id], x, CHUNK_AXIS[op_id],
                                 self._shapes[op_id], iteration)

    def data_gradient_baseline(self, u, d, iteration=0):
        """``(L*(L u - d), 1/2 ||L u - d||^2)`` with six transform calls."""
        t1 = self.call("fu1d", u, iteration)
        t2 = self.call("fu2d", t1, iteration)
        d_prime = self.call("f2d_adj", t2, iteration)
        res = d_prime - d
        f = self.call("f2d", res, iteration)
        a = self.call("fu2d_adj", f, iteration)
        return self.call("fu1d_adj", a, iteration), 0.5 * _vdot(res, res)

    def data_gradient_optimized(self, u, d_hat, iteration=0):
        """Same quantity with four calls; the residual stays in frequency space."""
        t1 = self.call("fu1d", u, iteration)
        res_hat = self.call("fu2d", t1, iteration)
        # fused subtraction: in place on the transform output
        res_hat -= d_hat
        a = self.call("fu2d_adj", res_hat, iteration)
        return self.call("fu1d_adj", a, iteration), 0.5 * _vdot(res_hat, res_hat)


def lsp_gradient(u, data, g, rho: float, pipe: OperatorPipeline, pipeline: str,
                 iteration: int = 0) -> tuple[np.ndarray, float]:
    """Gradient of the LSP objective and its value (data term as computed)."""
    if pipeline == "baseline":
        gd, data_loss = pipe.data_gradient_baseline(u, data, iteration)
    else:
        gd, data_loss = pipe.data_gradient_optimized(u, data, iteration)
    dg = grad(u) - g
    return gd - rho * div(dg), data_loss + 0.5 * rho * _vdot(dg, dg)


@dataclass
class CgContext:
    """``curvature(p)`` returns ``||L p||^2 + rho ||grad p||^2``."""

    curvature: Callable[[np.ndarray], float]
    stagnated: bool = False


def cg_update(u, G, G_prev, p_prev, context: CgContext):
    """One nonlinear CG step with Dai-Yuan ``beta`` and exact line search."""
    beta = 0.0
    if p_prev is not None:
        den = _vdot(p_prev, G - G_prev)
        if den > 0:
            beta = _vdot(G, G) / den
    p = -G + beta * p_prev if beta else -G
    context.stagnated = False
    curv = context.curvature(p)
    if not curv > 0 or not math.isfinite(curv):
        context.stagnated = True
        return u, p
    gamma = -_vdot(G, p) / curv
    return u + gamma * p, p


def _check_divergence(state: AdmmState, loss: float, factor: float):
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite inner loss at outer iteration {state.iteration}")
    state.inner_losses.append(loss)
    h = list(state.inner_losses)
    if len(h) == 4 and all(b > a for a, b in zip(h, h[1:])) and h[0] > 0 and h[-1] >= factor * h[0]:
        raise DivergenceError(
            f"inner loss grew from {h[0]:.3e} to {h[-1]:.3e} over 3 steps "
            f"at outer iteration {state.iteration}")


def _run_lsp(state: AdmmState, data, geom: Geometry, cfg: AdmmConfig,
             pipe: OperatorPipeline, pipeline: str) -> np.ndarray:
    ops = pipe.ops
    state.g_prev = state.g
    state.g = state.psi - state.lam / state.rho
    rho = state.rho

    def curvature(p):
        lp = ops.forward_freq(p)
        gp = grad(p)
        return _vdot(lp, lp) + rho * _vdot(gp, gp)

    ctx = CgContext(curvature)
    state.G_prev = np.zeros_like(state.u)
    state.p = None
    for _ in range(cfg.n_inner):
        state.G, loss = lsp_gradient(state.u, data, state.g, rho, pipe, pipeline, state.iteration)
        _check_divergence(state, loss, cfg.divergence_factor)
        state.u, state.p = cg_update(state.u, state.G, state.G_prev, state.p, ctx)
        state.stagnated += int(ctx.stagnated)
        state.G_prev = state.G
    return state.u


def lsp_baseline(state: AdmmState, d, geom: Geometry, cfg: AdmmConfig,
                 pipe: OperatorPipeline | None = None) -> np.ndarray:
    """``n_inner`` CG steps using the six-transform pipeline; updates ``state``."""
    d = d.data if isinstance(d, ProjectionSet) else np.asarray(d)
    return _run_lsp(state, d, geom, cfg, pipe or OperatorPipeline(geom, cfg), "baseline")


def lsp_optimized(state: AdmmState, d_hat, geom: Geometry, cfg: AdmmConfig,
                  pipe: OperatorPipeline | None = None) -> np.ndarray:
    """As :func:`lsp_baseline` but with ``d_hat = F2D d`` precomputed."""
    d_hat = d_hat.data if isinstance(d_hat, ProjectionSet) else np.asarray(d_hat)
    return _run_lsp(state, d_hat, geom, cfg, pipe or OperatorPipeline(geom, cfg), "optimized")


# --- RSP and updates ---------------------------------------------------------------

def shrink(z: np.ndarray, threshold: float) -> np.ndarray:
    """Isotropic soft threshold over the leading (axis) dimension."""
    m = np.sqrt(np.sum(np.abs(z) ** 2, axis=0))
    scale = np.zeros_like(m)
    np.divide(np.maximum(m - threshold, 0.0), m, out=scale, where=m > 0)
    return z * scale


def rsp_update(state: AdmmState, cfg: AdmmConfig) -> np.ndarray:
    if state.rho <= 0:
        raise ValueError("rho must be positive")
    z = grad(state.u) + state.lam / state.rho
    if cfg.alpha == 0:
        return z
    return shrink(z, cfg.alpha / state.rho)


def multiplier_penalty_update(state: AdmmState, cfg: AdmmConfig, psi_prev: np.ndarray,
                              grad_u: np.ndarray | None = None):
    """Return ``(lam, rho, r, s)``; ``state`` is not modified.

    ``lam`` is the unscaled multiplier (``g = psi - lam/rho``), so a change of
    ``rho`` leaves it as is.
    """
    gu = grad(state.u) if grad_u is None else grad_u
    diff = gu - state.psi
    lam = state.lam + state.rho * diff
    r = float(np.linalg.norm(diff))
    s = float(state.rho * np.linalg.norm(state.psi - psi_prev))
    rho = state.rho
    if not cfg.freeze_rho:
        if r > 10 * s:
            rho *= 2
        elif s > 10 * r:
            rho /= 2
    return lam, rho, r, s


# --- driver -------------------------------------------------------------------------

REPORT_COLUMNS = ("iteration", "loss", "E", "accuracy", "miss", "remote_hit", "cache_hit",
                  "ms_lsp", "ms_rsp", "ms_update")


@dataclass
class ReconReport:
    """Per-outer-iteration record.

    ``loss`` is the full objective ``1/2 ||L u - d||^2 + alpha TV(u)``.  ``E``
    and ``accuracy`` compare against a reference reconstruction when one is
    given (blank otherwise).  Memo counters are cumulative over the run.
    """

    rows: list = field(default_factory=list)
    aborted: str | None = None
    initial_loss: float = float("nan")
    memo_stats: dict = field(default_factory=dict)
    rho_history: list = field(default_factory=list)

    def add(self, **row):
        self.rows.append({c: row.get(c, "") for c in REPORT_COLUMNS})

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]

    @property
    def final_loss(self) -> float:
        return self.rows[-1]["loss"] if self.rows else self.initial_loss

    def counters(self) -> dict:
        last = self.rows[-1] if self.rows else {}
        return {k: int(last.get(k) or 0) for k in ("miss", "remote_hit", "cache_hit")}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


def _memo_parts(cfg: AdmmConfig, client, encoder):
    if cfg.memoization == "off":
        return None, None, False
    owns = client is None
    if client is None:
        client = MemoClient(backend_from_env(cfg.memoization), cfg.tau, cfg.cache_mode,
                            rescale=cfg.rescale_hits)
    if encoder is None:
        encoder = make_encoder(EncoderConfig(seed=cfg.seed))
    return client, encoder, owns


def reconstruct(d, geom: Geometry, cfg: AdmmConfig, reference=None, u0=None,
                client: MemoClient | None = None, encoder=None,
                trajectory: list | None = None, audit: bool = False,
                on_iteration: Callable | None = None, recorder: Callable | None = None):
    """Run ``cfg.n_outer`` ADMM iterations; returns ``(u, report)``.

    ``reference`` is either a final volume or a list of per-iteration volumes
    to compare against (E and accuracy columns).  When ``trajectory`` is a
    list, the iterate after every outer iteration is appended to it.
    ``recorder(op_id, location, slab)`` is called with every transform input
    slab (used to collect encoder training pairs).  A
    :class:`DivergenceError` stops the run; the report then keeps the rows
    so far and ``report.aborted`` holds the message.
    """
    d = d.data if isinstance(d, ProjectionSet) else np.asarray(d, dtype=np.complex128)
    if d.shape != geom.projection_shape:
        raise ValueError(f"data shape {d.shape} != {geom.projection_shape}")
    mclient, menc, owns_client = _memo_parts(cfg, client, encoder)
    runner = ChunkRunner(cfg.workers, cfg.chunk_extent, mclient, menc, cfg.deterministic, audit,
                         recorder=recorder)
    pipe = OperatorPipeline(geom, cfg, runner)
    ops = pipe.ops
    state = AdmmState.initial(geom, cfg.rho0, u0)
    report = ReconReport()
    report.initial_loss = objective(state.u, d, ops, cfg.alpha)
    d_hat = ops.f2d(d) if cfg.pipeline == "optimized" else None
    try:
        for it in range(cfg.n_outer):
            state.iteration = it
            runner.enabled = it >= cfg.memo_start
            t0 = time.perf_counter()
            if cfg.pipeline == "optimized":
                lsp_optimized(state, d_hat, geom, cfg, pipe)
            else:
                lsp_baseline(state, d, geom, cfg, pipe)
            t1 = time.perf_counter()
            psi_prev = state.psi
            state.psi = rsp_update(state, cfg)
            t2 = time.perf_counter()
            state.lam, rho, state.r, state.s = multiplier_penalty_update(state, cfg, psi_prev)
            state.rho = rho
            t3 = time.perf_counter()
            report.rho_history.append(state.rho)
            if trajectory is not None:
                trajectory.append(state.u.copy())
            row = dict(iteration=it, loss=objective(state.u, d, ops, cfg.alpha),
                       ms_lsp=1e3 * (t1 - t0), ms_rsp=1e3 * (t2 - t1), ms_update=1e3 * (t3 - t2))
            ref = _reference_at(reference, it)
            if ref is not None:
                row["E"], row["accuracy"] = accuracy(ref, state.u)
            if mclient is not None:
                st = mclient.stats()
                row.update(miss=st["miss"], remote_hit=st["remote_hit"], cache_hit=st["cache_hit"])
            else:
                row.update(miss=runner.calls, remote_hit=0, cache_hit=0)
            report.add(**row)
            if on_iteration is not None:
                on_iteration(it, state, report)
    except DivergenceError as exc:
        report.aborted = str(exc)
        logger.error("reconstruction aborted: %s", exc)
    finally:
        if mclient is not None:
            report.memo_stats = mclient.stats()
            if owns_client:
                mclient.close()
        runner.close()
    report.audit_log = runner.audit_log
    report.state = state
    return state.u, report


def _reference_at(reference, it):
    if reference is None:
        return None
    if isinstance(reference, (list, tuple)):
        return reference[it] if it < len(reference) else None
    return reference


def with_overrides(cfg: AdmmConfig, **kw) -> AdmmConfig:
    return replace(cfg, **kw)
