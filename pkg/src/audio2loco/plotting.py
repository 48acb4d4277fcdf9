"""PNG figures written next to the CSV outputs they summarise."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# no timestamps or version strings in the PNG, so figures are reproducible too
PNG_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)


def plot_timeline(timeline, columns, path, title=""):
    columns = [c for c in columns if timeline and c in timeline[0]]
    fig, axes = plt.subplots(len(columns), 1, figsize=(6, 1.8 * max(len(columns), 1)), sharex=True, squeeze=False)
    x = [row["iteration"] for row in timeline]
    for ax, col in zip(axes[:, 0], columns):
        ax.plot(x, [row[col] for row in timeline], marker=".", lw=1)
        ax.set_ylabel(col.replace("_", " "))
        ax.grid(alpha=0.3)
    axes[-1, 0].set_xlabel("iteration")
    if title:
        axes[0, 0].set_title(title)
    _save(fig, path)


def plot_align_timeline(history, path):
    fig, axes = plt.subplots(1, 2, figsize=(9, 3))
    for ax, phase, label in zip(axes, ("vae", "align"), ("VAE loss", "InfoNCE")):
        rows = [h for h in history if h["phase"] == phase]
        ax.plot([h["step"] for h in rows], [h["loss"] for h in rows], lw=0.8)
        ax.set_title(label)
        ax.set_xlabel("step")
        if rows and min(h["loss"] for h in rows) > 0:
            ax.set_yscale("log")
        ax.grid(alpha=0.3)
    _save(fig, path)


def plot_eval(report, path):
    rows = report.rows
    fig, axes = plt.subplots(1, 2, figsize=(max(6, 0.25 * len(rows) + 3), 3))
    idx = range(len(rows))
    colors = ["tab:green" if r.success else "tab:red" for r in rows]
    axes[0].bar(idx, [r.mpjpe for r in rows], color=colors)
    axes[0].set_ylabel("MPJPE (rad)")
    axes[1].bar(idx, [r.bas for r in rows], color=colors)
    axes[1].set_ylabel("BAS")
    for ax in axes:
        ax.set_xlabel("clip")
        ax.grid(alpha=0.3, axis="y")
    agg = report.aggregate()
    fig.suptitle(f"{report.label}: success {agg['success_rate']:.2f}")
    _save(fig, path)


def plot_ablation(header, rows, path, axis):
    col = {name: i for i, name in enumerate(header)}
    values = list(dict.fromkeys(str(r[col["value"]]) for r in rows))
    metrics = ["success_rate", "mpjpe_success", "bas_success"]
    if any(r[col["latency_ms"]] != "" for r in rows):
        metrics.append("latency_ms")
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3), squeeze=False)
    for ax, m in zip(axes[0], metrics):
        for k, v in enumerate(values):
            ys = [r[col[m]] for r in rows if str(r[col["value"]]) == v and r[col[m]] != ""]
            ys = [y for y in ys if not (isinstance(y, float) and math.isnan(y))]
            ax.scatter([k] * len(ys), ys, color="tab:blue", s=18)
            if ys:
                ax.hlines(sum(ys) / len(ys), k - 0.3, k + 0.3, color="k")
        ax.set_xticks(range(len(values)), values)
        ax.set_xlabel(axis)
        ax.set_title(m.replace("_", " "))
        ax.grid(alpha=0.3, axis="y")
    _save(fig, path)
