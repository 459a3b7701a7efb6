"""Report emission: CSV tables, a gnuplot script per table, and a PNG preview.

The PNG is drawn with matplotlib on the Agg backend so no display is needed.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

SWEEP_COLUMNS = ("tau", "accuracy", "E", "final_loss", "hit_rate", "aborted")


def gnuplot_script(csv_name: str, png_name: str, x: str, ys: list[str], columns: list[str],
                   logscale_y: bool = False) -> str:
    """A gnuplot script that plots ``ys`` against ``x`` from a headered CSV."""
    idx = {c: i + 1 for i, c in enumerate(columns)}
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        "set terminal pngcairo size 800,500",
        f"set output '{png_name}'",
        f"set xlabel '{x}'",
    ]
    if logscale_y:
        lines.append("set logscale y")
    plots = [f"'{csv_name}' using {idx[x]}:{idx[y]} with linespoints title '{y}'" for y in ys]
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


def _column(rows, name):
    out = []
    for r in rows:
        v = r.get(name, "")
        out.append(float(v) if v not in ("", None) else float("nan"))
    return out


def write_report(report, out_dir, stem: str = "report") -> dict:
    """Write ``<stem>.csv``, ``<stem>.gp`` and ``<stem>.png`` for a reconstruction."""
    from .admm import REPORT_COLUMNS

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{stem}.{k}" for k in ("csv", "gp", "png")}
    report.to_csv(paths["csv"])
    paths["gp"].write_text(gnuplot_script(paths["csv"].name, f"{stem}_gnuplot.png", "iteration",
                                          ["loss"], list(REPORT_COLUMNS), logscale_y=True))
    it = _column(report.rows, "iteration")
    fig, ax = plt.subplots(1, 2, figsize=(10, 4))
    ax[0].semilogy(it, _column(report.rows, "loss"), marker=".")
    ax[0].set_xlabel("outer iteration")
    ax[0].set_ylabel("objective")
    hits = [a + b for a, b in zip(_column(report.rows, "remote_hit"),
                                  _column(report.rows, "cache_hit"))]
    ax[1].plot(it, _column(report.rows, "miss"), label="miss")
    ax[1].plot(it, hits, label="hits")
    ax[1].set_xlabel("outer iteration")
    ax[1].set_ylabel("cumulative chunk calls")
    ax[1].legend()
    fig.tight_layout()
    fig.savefig(paths["png"], dpi=100)
    plt.close(fig)
    return paths


def write_sweep(rows: list[dict], out_dir, stem: str = "sweep") -> dict:
    """Write a threshold sweep table (one row per tau) plus its plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{stem}.{k}" for k in ("csv", "gp", "png")}
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({c: (f"{r[c]:.10g}" if isinstance(r.get(c), float) else r.get(c, ""))
                        for c in SWEEP_COLUMNS})
    paths["gp"].write_text(gnuplot_script(paths["csv"].name, f"{stem}_gnuplot.png", "tau",
                                          ["accuracy"], list(SWEEP_COLUMNS)))
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(_column(rows, "tau"), _column(rows, "accuracy"), marker="o")
    ax.set_xlabel("tau")
    ax.set_ylabel("accuracy vs memo-off run")
    fig.tight_layout()
    fig.savefig(paths["png"], dpi=100)
    plt.close(fig)
    return paths
