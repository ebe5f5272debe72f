"""Figure rendering for CLI report paths.

Every CSV the CLI writes gets a PNG sibling: learning curves next to
curve.csv, runtime/memory scaling next to bench.csv, per-tensor error bars
for gradient checks, and a dataset preview after generation. The CSVs stay
the canonical machine-readable output; figures are for eyeballs.
matplotlib is imported lazily so non-reporting commands never pay for it.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_learning_curve(curve: list[dict], path) -> Path:
    plt = _plt()
    epochs = [row["epoch"] for row in curve]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(epochs, [row["train_loss"] for row in curve], marker="o", ms=3)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax1.grid(alpha=0.3)
    ax2.plot(epochs, [row["val_success"] for row in curve], marker="o", ms=3, color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation success rate")
    ax2.set_ylim(0, 1.02)
    ax2.grid(alpha=0.3)
    diverged = sum(row["diverged_batches"] for row in curve)
    fig.suptitle(f"training curve ({diverged} diverged batches)")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return Path(path)


def save_bench_figures(records, out_dir) -> list[Path]:
    plt = _plt()
    out_dir = Path(out_dir)
    paths = []

    groups: dict[tuple[str, str, int], list] = {}
    for r in records:
        groups.setdefault((r.planner, r.mode, r.m), []).append(r)

    fig, (ax_f, ax_b) = plt.subplots(1, 2, figsize=(9, 3.4))
    for (planner, mode, m), rows in sorted(groups.items()):
        rows = sorted(rows, key=lambda r: r.k)
        ks = [r.k for r in rows]
        label = f"{planner}/{mode} m={m}"
        style = "-o" if mode == "implicit" else "--s"
        ax_f.plot(ks, [r.fwd_s for r in rows], style, ms=3, label=label)
        ax_b.plot(ks, [r.bwd_s for r in rows], style, ms=3, label=label)
    ax_f.set_xlabel("iterations / layers K")
    ax_f.set_ylabel("forward time (s)")
    ax_b.set_xlabel("iterations / layers K")
    ax_b.set_ylabel("backward time (s)")
    for ax in (ax_f, ax_b):
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
    fig.tight_layout()
    p = out_dir / "bench_runtime.png"
    fig.savefig(p, dpi=130)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(5, 3.4))
    for (planner, mode, m), rows in sorted(groups.items()):
        rows = sorted(rows, key=lambda r: r.k)
        style = "-o" if mode == "implicit" else "--s"
        ax.plot([r.k for r in rows], [r.stored_floats for r in rows], style, ms=3,
                label=f"{planner}/{mode} m={m}")
    ax.set_xlabel("iterations / layers K")
    ax.set_ylabel("stored activation floats")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    p = out_dir / "bench_memory.png"
    fig.savefig(p, dpi=130)
    plt.close(fig)
    paths.append(p)
    return paths


def save_gradcheck_figure(reports, path) -> Path:
    """Bar chart of worst-case per-tensor errors across gradcheck trials."""
    plt = _plt()
    names = sorted({n for rep in reports for n in rep.implicit_vs_explicit})
    pair = [max(rep.implicit_vs_explicit.get(n, 0.0) for rep in reports) for n in names]
    fd = [
        max(
            max(rep.implicit_vs_fd.get(n, 0.0), rep.explicit_vs_fd.get(n, 0.0))
            for rep in reports
        )
        for n in names
    ]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(7, 3.6))
    ax.bar(x - 0.2, pair, width=0.4, label="implicit vs unrolled")
    ax.bar(x + 0.2, fd, width=0.4, label="vs finite differences")
    if reports:
        ax.axhline(reports[0].pair_tol, color="tab:red", ls=":", lw=1, label="pair tolerance")
        ax.axhline(reports[0].fd_tol, color="tab:orange", ls=":", lw=1, label="fd tolerance")
    ax.set_yscale("log")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("max relative error")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return Path(path)


def save_dataset_preview(samples, path, max_grids: int = 9) -> Path:
    plt = _plt()
    shown = samples[:max_grids]
    cols = min(3, len(shown))
    rows = (len(shown) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.6 * cols, 2.6 * rows), squeeze=False)
    for ax in axes.reshape(-1):
        ax.axis("off")
    for ax, sample in zip(axes.reshape(-1), shown):
        ax.imshow(sample.grid.cells, cmap="gray_r", interpolation="nearest")
        ax.plot(sample.grid.goal[1], sample.grid.goal[0], "r*", ms=10)
        ax.axis("off")
    fig.suptitle("dataset preview (star = goal)")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return Path(path)
