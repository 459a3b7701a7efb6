import math

import numpy as np
import pytest

from memolam import admm
from memolam.admm import tv_norm
from memolam.cli import (EXIT_ABORT, EXIT_CONFIG, EXIT_OK, ConfigError, bench_rows,
                         build_run_config, format_run_config, load_run_config, main,
                         parse_config_text)
from memolam.encoder import load_weights
from memolam.geometry import read_array
from memolam.phantom import make_phantom

SMALL = ["--set", "n=8", "--set", "n_theta=4", "--set", "n_outer=2"]


def test_config_parsing_and_validation(tmp_path):
    assert parse_config_text("a = 1 # c\n\n b=x=y\n") == {"a": "1", "b": "x=y"}
    rc = build_run_config({"tau": "0.9", "encoder.key_dim": "12", "n": "16", "plot": "off"})
    assert rc.admm.tau == 0.9 and rc.encoder.key_dim == 12 and rc.n == 16 and rc.plot is False
    assert rc.admm.chunk_extent == 16
    for bad in ({"nope": "1"}, {"tau": "abc"}, {"tau": "1.5"}, {"phantom": "cat"},
                {"noise": "-1"}, {"encoder.variant": "mlp"}, {"n": "0"}):
        with pytest.raises(ConfigError):
            build_run_config(bad)
    path = tmp_path / "run.conf"
    path.write_text("tau = 0.88\nn = 8\n")
    rc = load_run_config(str(path), ["n=12"])
    assert rc.admm.tau == 0.88 and rc.n == 12
    again = build_run_config(parse_config_text(format_run_config(rc)))
    assert again == rc


def test_unknown_key_exit_code(tmp_path, capsys):
    assert main(["reconstruct", "--set", "bogus=1", "--out-dir", str(tmp_path)]) == EXIT_CONFIG
    assert "unknown config key" in capsys.readouterr().err
    assert main(["reconstruct", "--config", str(tmp_path / "missing.conf")]) == EXIT_CONFIG


def test_reconstruct_writes_outputs(tmp_path, capsys):
    out = tmp_path / "off"
    assert main(["reconstruct", *SMALL, "--out-dir", str(out)]) == EXIT_OK
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("final_loss=") and "hit_rate=0.0000" in line and "aborted=no" in line
    for name in ("volume.lvol", "truth.lvol", "report.csv", "report.gp", "report.png", "run.conf"):
        assert (out / name).exists(), name
    assert (out / "report.png").read_bytes()[:4] == b"\x89PNG"
    assert "set logscale y" in (out / "report.gp").read_text()
    rows = (out / "report.csv").read_text().splitlines()
    assert rows[0].startswith("iteration,loss,E,accuracy,miss") and len(rows) == 3
    # deterministic rerun
    out2 = tmp_path / "off2"
    assert main(["reconstruct", *SMALL, "--out-dir", str(out2)]) == EXIT_OK
    assert (out / "volume.lvol").read_bytes() == (out2 / "volume.lvol").read_bytes()


def test_paired_runs_feed_accuracy(tmp_path, capsys):
    off, on = tmp_path / "off", tmp_path / "on"
    assert main(["reconstruct", *SMALL, "--set", "plot=0", "--out-dir", str(off)]) == EXIT_OK
    assert main(["reconstruct", *SMALL, "--set", "plot=0", "--set", "memoization=local",
                 "--set", "tau=0.92", "--out-dir", str(on)]) == EXIT_OK
    capsys.readouterr()
    assert main(["accuracy", str(off / "volume.lvol"), str(on / "volume.lvol")]) == EXIT_OK
    text = capsys.readouterr().out
    E = float(text.split()[0].split("=")[1])
    assert text.startswith("E=") and 0 <= E
    assert main(["accuracy", str(off / "volume.lvol"), str(tmp_path / "none")]) == EXIT_CONFIG


def test_reconstruct_abort_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(admm, "lsp_gradient", lambda u, *a, **k: (np.zeros_like(u), math.nan))
    assert main(["reconstruct", *SMALL, "--set", "plot=0",
                 "--out-dir", str(tmp_path)]) == EXIT_ABORT


def test_sweep(tmp_path, capsys):
    assert main(["sweep", *SMALL, "--taus", "0.9", "0.96", "--out-dir", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "tau,accuracy,E,final_loss,hit_rate,aborted" and len(lines) == 3
    assert (tmp_path / "volume_tau0.96.lvol").exists() and (tmp_path / "sweep.png").exists()


def test_phantom_command(tmp_path):
    a, b = tmp_path / "a.lvol", tmp_path / "b.lvol"
    assert main(["phantom", "--shape", "8", "8", "8", "--seed", "3", "--out", str(a)]) == EXIT_OK
    assert main(["phantom", "--shape", "8", "8", "8", "--seed", "3", "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert main(["phantom", "--shape", "0", "8", "8", "--out", str(a)]) == EXIT_CONFIG


def test_blocks_phantom_is_tv_friendly():
    blocks = make_phantom("blocks", (32, 32, 32), seed=1).astype(complex)
    noise = np.random.default_rng(0).standard_normal((32, 32, 32)).astype(complex)
    blocks /= np.linalg.norm(blocks)
    noise /= np.linalg.norm(noise)
    assert tv_norm(blocks) < tv_norm(noise)
    vals = np.unique(np.round(blocks.real, 12))
    assert len(vals) < 20  # piecewise constant


def test_plan_offload_command(tmp_path, capsys):
    assert main(["plan-offload"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "psi[gap 0]" in out and "MT=inf" in out
    assert main(["plan-offload", "--format", "csv", "--lru-budget", "0"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "var,gap,choice,offload_start_ms,prefetch_start_ms"
    assert out[-1].startswith("# LRU budget=1e+10")
    bad = tmp_path / "t.txt"
    bad.write_text("nonsense\n")
    assert main(["plan-offload", "--trace", str(bad)]) == EXIT_CONFIG


def test_serve_memo_bad_addr():
    assert main(["serve-memo", "--addr", "nowhere"]) == EXIT_CONFIG


def test_bench_counters():
    rc = build_run_config({"n": "16", "n_theta": "8", "chunk_extent": "4"})
    rows = bench_rows(rc, repeats=1)
    by = {(r["op"], r["case"]): r for r in rows}
    for op in ("fu1d", "fu2d", "fu2d_adj", "fu1d_adj"):
        n = by[(op, "exact")]["chunks"]
        assert n == 4
        assert by[(op, "miss")]["miss"] == n
        assert by[(op, "remote_hit")]["remote_hit"] == n
        hit = by[(op, "cache_hit")]
        assert hit["cache_hit"] == n and hit["comparisons"] == n
        for case in ("miss", "remote_hit", "cache_hit"):
            r = by[(op, case)]
            assert r["miss"] + r["remote_hit"] + r["cache_hit"] == r["chunks"]


def test_bench_command_writes_csv(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--set", "n=8", "--set", "n_theta=4", "--repeats", "1",
                 "--out", str(out)]) == EXIT_OK
    assert out.read_text().splitlines()[0].startswith("op,case,chunks,ms_per_chunk")


def test_train_encoder_command(tmp_path, capsys):
    out = tmp_path / "enc.lenc"
    assert main(["train-encoder", *SMALL, "--set", "n_outer=3", "--set", "encoder.n_pairs=8",
                 "--set", "encoder.epochs=1", "--set", "encoder.key_dim=8",
                 "--out", str(out)]) == EXIT_OK
    enc = load_weights(out)
    assert enc.variant == "cnn" and enc.key_dim == 8
    assert "held-out loss" in capsys.readouterr().out
