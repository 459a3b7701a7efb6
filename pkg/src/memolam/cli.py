"""Command-line entry points.

Run configuration comes from a flat ``key = value`` file plus repeated
``--set key=value`` overrides.  Solver keys use the :class:`AdmmConfig`
field names, encoder keys are prefixed with ``encoder.``, and the remaining
keys (geometry, data, outputs) are the :class:`RunConfig` fields.

Exit codes: 0 success, 1 solver abort, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import offload
from .admm import AdmmConfig, OperatorPipeline, accuracy, reconstruct
from .encoder import (EncoderConfig, load_weights, make_encoder, sample_pairs, save_weights,
                      train_contrastive)
from .geometry import Geometry, read_array, split_chunks, write_array
from .memoclient import LocalBackend, MemoClient, TcpBackend, backend_from_env
from .memoserver import MemoServer, MemoStore, parse_addr
from .operators import CHUNK_AXIS, get_operators
from .phantom import KINDS, make_phantom
from .plotting import write_report, write_sweep
from .scalerun import ChunkRunner

logger = logging.getLogger("memolam")

EXIT_OK, EXIT_ABORT, EXIT_CONFIG = 0, 1, 2
TAU_GRID = (0.86, 0.88, 0.90, 0.92, 0.94, 0.96)
ENCODER_PREFIX = "encoder."
MEMO_OPS = ("fu1d", "fu2d", "fu2d_adj", "fu1d_adj")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    n: int = 32  # cube side
    n_theta: int = 0  # 0 means one angle per detector column
    phi_deg: float = 30.0
    data: str = ""  # LVOL projections; empty means simulate from a phantom
    reference: str = ""  # LVOL volume for E / accuracy columns
    phantom: str = "blocks"
    phantom_seed: int = 1
    noise: float = 0.0  # complex Gaussian noise, relative to the data's std
    noise_seed: int = 0
    encoder_weights: str = ""
    memo_addr: str = ""  # host:port; falls back to MLR_MEMO_ADDR
    out_dir: str = "run"
    plot: bool = True

    def geometry(self) -> Geometry:
        return Geometry.cube(self.n, self.n_theta or None, math.radians(self.phi_deg))


_RUN_KEYS = [f.name for f in dataclasses.fields(RunConfig) if f.name not in ("admm", "encoder")]


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw.strip()


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later keys win."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_run_config(pairs: dict[str, str]) -> RunConfig:
    """Validate ``pairs`` into a :class:`RunConfig`; unknown keys are rejected."""
    base = RunConfig()
    admm_kw, enc_kw, run_kw = {}, {}, {}
    admm_defaults = {f.name: getattr(base.admm, f.name) for f in dataclasses.fields(AdmmConfig)}
    enc_defaults = {f.name: getattr(base.encoder, f.name) for f in dataclasses.fields(EncoderConfig)}
    for key, raw in pairs.items():
        if key.startswith(ENCODER_PREFIX) and key[len(ENCODER_PREFIX):] in enc_defaults:
            name = key[len(ENCODER_PREFIX):]
            enc_kw[name] = _coerce(raw, enc_defaults[name], key)
        elif key in admm_defaults:
            admm_kw[key] = _coerce(raw, admm_defaults[key], key)
        elif key in _RUN_KEYS:
            run_kw[key] = _coerce(raw, getattr(base, key), key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        rc = RunConfig(AdmmConfig(**admm_kw), EncoderConfig(**enc_kw), **run_kw)
        rc.geometry()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if rc.phantom not in KINDS:
        raise ConfigError(f"phantom must be one of {KINDS}")
    if rc.noise < 0:
        raise ConfigError("noise must be >= 0")
    return rc


def load_run_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    pairs = {}
    if path:
        try:
            pairs.update(parse_config_text(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return build_run_config(pairs)


def format_run_config(rc: RunConfig) -> str:
    lines = [f"{f.name} = {getattr(rc.admm, f.name)}" for f in dataclasses.fields(AdmmConfig)]
    lines += [f"{ENCODER_PREFIX}{f.name} = {getattr(rc.encoder, f.name)}"
              for f in dataclasses.fields(EncoderConfig)]
    lines += [f"{k} = {getattr(rc, k)}" for k in _RUN_KEYS]
    return "\n".join(lines) + "\n"


# --- data and memo plumbing ---------------------------------------------------

def simulate_data(rc: RunConfig, geom: Geometry) -> tuple[np.ndarray, np.ndarray]:
    """Phantom and its (optionally noisy) projections."""
    truth = make_phantom(rc.phantom, geom.volume_shape, rc.phantom_seed)
    d = get_operators(geom, rc.admm.nufft).forward(truth)
    if rc.noise > 0:
        rng = np.random.default_rng(rc.noise_seed)
        scale = rc.noise * np.abs(d).std() / np.sqrt(2)
        d = d + scale * (rng.standard_normal(d.shape) + 1j * rng.standard_normal(d.shape))
    return truth, d


def load_data(rc: RunConfig, geom: Geometry):
    if not rc.data:
        return simulate_data(rc, geom)
    d, _ = read_array(rc.data)
    if d.shape != geom.projection_shape:
        raise ConfigError(f"data shape {d.shape} does not match geometry {geom.projection_shape}")
    return None, d


def make_memo(rc: RunConfig):
    """``(client, encoder)`` for the configured memoization mode, or ``(None, None)``."""
    cfg = rc.admm
    if cfg.memoization == "off":
        return None, None
    encoder = load_weights(rc.encoder_weights) if rc.encoder_weights else make_encoder(
        dataclasses.replace(rc.encoder, seed=cfg.seed))
    if cfg.memoization == "distributed" and rc.memo_addr:
        backend = TcpBackend(rc.memo_addr)
    elif cfg.memoization == "distributed":
        backend = backend_from_env("distributed")
    else:
        backend = LocalBackend()
    return MemoClient(backend, cfg.tau, cfg.cache_mode, rescale=cfg.rescale_hits), encoder


def _summary(report, hit_total: int, calls: int) -> str:
    last = report.rows[-1] if report.rows else {}
    e = last.get("E", "")
    acc = last.get("accuracy", "")
    rate = hit_total / calls if calls else 0.0
    fmt = (lambda v: f"{v:.6g}" if isinstance(v, float) else "n/a")
    return (f"final_loss={report.final_loss:.6g} E={fmt(e)} accuracy={fmt(acc)} "
            f"hit_rate={rate:.4f} iterations={len(report.rows)} "
            f"aborted={'yes' if report.aborted else 'no'}")


def run_reconstruction(rc: RunConfig, reference=None):
    geom = rc.geometry()
    _, d = load_data(rc, geom)
    client, encoder = make_memo(rc)
    try:
        u, report = reconstruct(d, geom, rc.admm, reference=reference, client=client,
                                encoder=encoder)
    finally:
        if client is not None:
            client.close()
    return u, report


# --- subcommands ----------------------------------------------------------------

def cmd_reconstruct(args) -> int:
    rc = load_run_config(args.config, args.set)
    out = Path(args.out_dir or rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reference = read_array(rc.reference)[0] if rc.reference else None
    if not rc.data:
        truth, _ = simulate_data(rc, rc.geometry())
        write_array(out / "truth.lvol", truth)
    u, report = run_reconstruction(rc, reference)
    write_array(out / "volume.lvol", u)
    if rc.plot:
        write_report(report, out)
    else:
        report.to_csv(out / "report.csv")
    (out / "run.conf").write_text(format_run_config(rc))
    c = report.counters()
    print(_summary(report, c["remote_hit"] + c["cache_hit"], sum(c.values())))
    if report.aborted:
        print(f"aborted: {report.aborted}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


def cmd_sweep(args) -> int:
    """Memo-off reference run followed by one memoized run per threshold."""
    rc = load_run_config(args.config, args.set)
    out = Path(args.out_dir or rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    off = dataclasses.replace(rc, admm=dataclasses.replace(rc.admm, memoization="off"))
    u_ref, rep_ref = run_reconstruction(off)
    if rep_ref.aborted:
        print(f"reference run aborted: {rep_ref.aborted}", file=sys.stderr)
        return EXIT_ABORT
    write_array(out / "volume_off.lvol", u_ref)
    mode = rc.admm.memoization if rc.admm.memoization != "off" else "local"
    rows = []
    for tau in args.taus:
        cfg = dataclasses.replace(rc.admm, memoization=mode, tau=tau)
        u, rep = run_reconstruction(dataclasses.replace(rc, admm=cfg))
        write_array(out / f"volume_tau{tau:.2f}.lvol", u)
        E, acc = accuracy(u_ref, u)
        c = rep.counters()
        calls = sum(c.values())
        rows.append(dict(tau=tau, accuracy=acc, E=E, final_loss=rep.final_loss,
                         hit_rate=(c["remote_hit"] + c["cache_hit"]) / calls if calls else 0.0,
                         aborted=int(rep.aborted is not None)))
        print(f"tau={tau:.2f} accuracy={acc:.4f} final_loss={rep.final_loss:.6g} "
              f"(memo off {rep_ref.final_loss:.6g})")
    write_sweep(rows, out)
    return EXIT_OK


def cmd_accuracy(args) -> int:
    try:
        ref, _ = read_array(args.reference)
        comp, _ = read_array(args.computed)
        E, acc = accuracy(ref, comp)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"E={E:.6g} accuracy={acc:.6g}")
    return EXIT_OK


def cmd_phantom(args) -> int:
    try:
        vol = make_phantom(args.kind, args.shape, args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    write_array(args.out, vol)
    print(f"wrote {args.kind} phantom {vol.shape} to {args.out}")
    return EXIT_OK


def cmd_serve_memo(args) -> int:
    try:
        host, port = parse_addr(args.addr)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    store = MemoStore(nlist=args.nlist, nprobe=args.nprobe, train_size=args.train_size)
    with MemoServer((host, port), store, args.nprobe) as server:
        print(f"memo server listening on {server.address}", flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
    return EXIT_OK


def cmd_plan_offload(args) -> int:
    try:
        if args.trace:
            trace = offload.load_trace(args.trace, args.bandwidth)
        else:
            trace = offload.example_trace(args.bandwidth)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    plan, sc = offload.plan_search(trace)
    if args.format == "csv":
        sys.stdout.write(offload.plan_to_csv(plan, sc))
    else:
        for line in plan.describe() or ["(no offloading)"]:
            print(line)
        print(f"M={sc.M:.4f} T={sc.T:.4f} MT={sc.MT:.4g} peak={sc.peak:.4g} "
              f"baseline_peak={sc.base_peak:.4g}")
    if args.lru_budget is not None:
        budget = args.lru_budget if args.lru_budget > 0 else sc.peak
        try:
            lru = offload.lru_baseline(trace, budget)
            print(f"# LRU budget={budget:.4g}: M={lru.M:.4f} T={lru.T:.4f} MT={lru.MT:.4g}")
        except offload.InfeasibleBudget as exc:
            print(f"# LRU infeasible: {exc}")
    return EXIT_OK


def record_training_pairs(rc: RunConfig, op_id: str, n_pairs: int, seed: int):
    """Memo-off run that records every input slab of ``op_id`` by location."""
    geom = rc.geometry()
    _, d = load_data(rc, geom)
    traj: dict = {}

    def recorder(op, loc, slab):
        if op == op_id:
            traj.setdefault(loc, []).append(np.array(slab))

    cfg = dataclasses.replace(rc.admm, memoization="off")
    reconstruct(d, geom, cfg, recorder=recorder)
    return sample_pairs(traj, n_pairs, seed)


def cmd_train_encoder(args) -> int:
    rc = load_run_config(args.config, args.set)
    ecfg = dataclasses.replace(rc.encoder, variant="cnn")
    pairs = record_training_pairs(rc, args.op, ecfg.n_pairs, ecfg.seed)
    n_held = max(1, len(pairs) // 5)
    heldout = record_training_pairs(rc, args.op, n_held, ecfg.seed + 1)
    enc, hist = train_contrastive(pairs, ecfg, heldout)
    save_weights(args.out, enc)
    print(f"held-out loss {hist.heldout_loss[0]:.4g} -> {hist.heldout_loss[-1]:.4g}; "
          f"weights written to {args.out}")
    return EXIT_OK


BENCH_COLUMNS = ("op", "case", "chunks", "ms_per_chunk", "comparisons", "miss", "remote_hit",
                 "cache_hit")


def bench_rows(rc: RunConfig, repeats: int = 3) -> list[dict]:
    """Per-operator timings of exact compute and the three memoization cases.

    ``miss`` looks up, computes and inserts; ``remote_hit`` uses a fresh
    client against the same store so the private cache is empty;
    ``cache_hit`` repeats the call on that client.
    """
    geom = rc.geometry()
    pipe = OperatorPipeline(geom, rc.admm)
    rng = np.random.default_rng(rc.admm.seed)
    shapes = {"fu1d": geom.volume_shape, "fu2d": geom.intermediate_shape,
              "fu2d_adj": geom.projection_shape, "fu1d_adj": geom.intermediate_shape}
    rows = []
    for op in MEMO_OPS:
        x = rng.standard_normal(shapes[op]) + 1j * rng.standard_normal(shapes[op])
        kernel, shape_fn, axis = pipe._kernels[op], pipe._shapes[op], CHUNK_AXIS[op]
        exact_runner = ChunkRunner(1, rc.admm.chunk_extent)
        t = time.perf_counter()
        for _ in range(repeats):
            exact_runner.apply(op, kernel, x, axis, shape_fn)
        n = exact_runner.calls // repeats
        rows.append(dict(op=op, case="exact", chunks=n,
                         ms_per_chunk=1e3 * (time.perf_counter() - t) / (repeats * n),
                         comparisons=0, miss=0, remote_hit=0, cache_hit=0))
        backend = LocalBackend()
        encoder = make_encoder(dataclasses.replace(rc.encoder, seed=rc.admm.seed))
        for c in split_chunks(x, axis, rc.admm.chunk_extent):
            encoder.encode(c.data, op)  # one-time key matrix setup stays out of the timings
        first = MemoClient(backend, rc.admm.tau, rc.admm.cache_mode)
        second = MemoClient(backend, rc.admm.tau, rc.admm.cache_mode)
        for case, client in (("miss", first), ("remote_hit", second), ("cache_hit", second)):
            before = client.stats()
            runner = ChunkRunner(1, rc.admm.chunk_extent, client, encoder, deterministic=True)
            t = time.perf_counter()
            runner.apply(op, kernel, x, axis, shape_fn)
            dt = time.perf_counter() - t
            after = client.stats()
            delta = {k: after[k] - before[k] for k in ("miss", "remote_hit", "cache_hit",
                                                         "comparisons")}
            rows.append(dict(op=op, case=case, chunks=runner.calls,
                             ms_per_chunk=1e3 * dt / runner.calls, **delta))
        first.close()
        second.close()
    return rows


def cmd_bench(args) -> int:
    rc = load_run_config(args.config, args.set)
    rows = bench_rows(rc, args.repeats)
    out = Path(args.out) if args.out else None
    lines = [",".join(BENCH_COLUMNS)]
    for r in rows:
        lines.append(",".join(f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c])
                              for c in BENCH_COLUMNS))
    text = "\n".join(lines) + "\n"
    if out:
        out.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="memolam",
                                description="Memoized ADMM laminography reconstruction tools")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value run configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
        return sp

    sp = with_config(sub.add_parser("reconstruct", help="run the ADMM solver"))
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_reconstruct)

    sp = with_config(sub.add_parser("sweep", help="accuracy over a grid of thresholds"))
    sp.add_argument("--out-dir")
    sp.add_argument("--taus", type=float, nargs="+", default=list(TAU_GRID))
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("accuracy", help="E and accuracy of one volume against another")
    sp.add_argument("reference")
    sp.add_argument("computed")
    sp.set_defaults(func=cmd_accuracy)

    sp = sub.add_parser("phantom", help="write a synthetic volume")
    sp.add_argument("--shape", type=int, nargs=3, default=[32, 32, 32])
    sp.add_argument("--kind", choices=KINDS, default="blocks")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("serve-memo", help="run a memoization store server")
    sp.add_argument("--addr", default="127.0.0.1:7070")
    sp.add_argument("--nlist", type=int, default=64)
    sp.add_argument("--nprobe", type=int, default=8)
    sp.add_argument("--train-size", type=int, default=1024)
    sp.set_defaults(func=cmd_serve_memo)

    sp = sub.add_parser("plan-offload", help="search offload/prefetch plans for a trace")
    sp.add_argument("--trace", help="trace file (default: bundled example)")
    sp.add_argument("--bandwidth", type=float, default=offload.DEFAULT_BANDWIDTH,
                    help="transfer bandwidth in bytes per ms")
    sp.add_argument("--format", choices=("plan", "csv"), default="plan")
    sp.add_argument("--lru-budget", type=float, default=None,
                    help="also score the LRU baseline; 0 uses the plan's peak")
    sp.set_defaults(func=cmd_plan_offload)

    sp = with_config(sub.add_parser("train-encoder", help="fit the CNN key encoder"))
    sp.add_argument("--op", choices=MEMO_OPS, default="fu1d")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_encoder)

    sp = with_config(sub.add_parser("bench", help="time exact and memoized chunk calls"))
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
