"""Run summaries: one tidy CSV plus rendered figures.

The report stage scans completed run directories, merges their evaluation
results into one table (variant, alpha, beta, M, seed, accuracy), and renders
whatever figures the collected artifacts support: training-loss curves,
filter-alignment curves, the alpha/beta accuracy grid, and the sampling
lattice colored by cluster.
"""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from . import io
from .retina import SamplingLattice

log = logging.getLogger(__name__)


def collect_run_rows(run_dirs: list[Path]) -> pd.DataFrame:
    rows = []
    for run in run_dirs:
        report_file = run / "eval_report.json"
        if not report_file.exists():
            log.warning("skipping %s: no eval_report.json", run)
            continue
        report = io.read_json(report_file)
        row = {
            "run": run.name,
            "variant": None,
            "alpha": np.nan,
            "beta": np.nan,
            "M": np.nan,
            "seed": report.get("seed", 0),
            "task": report.get("task", ""),
            "accuracy": report.get("accuracy", np.nan),
        }
        synth_prov = run / "synth.prov.json"
        if synth_prov.exists():
            row["variant"] = io.read_json(synth_prov)["params"].get("variant")
        clusters = run / "clusters.json"
        if clusters.exists():
            params = io.read_json(clusters).get("params", {})
            row["alpha"] = params.get("alpha", np.nan)
            row["beta"] = params.get("beta", np.nan)
            row["M"] = io.read_json(clusters).get("M", np.nan)
        rows.append(row)
    return pd.DataFrame(rows, columns=["run", "variant", "alpha", "beta", "M",
                                       "seed", "task", "accuracy"])


def _plot_curves(run_dirs: list[Path], column: str, ylabel: str, path: Path) -> bool:
    fig, ax = plt.subplots(figsize=(6, 4))
    plotted = False
    for run in run_dirs:
        log_file = run / "training_log.csv"
        if not log_file.exists():
            continue
        table = pd.read_csv(log_file)
        if column not in table or table[column].dropna().empty:
            continue
        ax.plot(table["epoch"], table[column], label=run.name)
        plotted = True
    if not plotted:
        plt.close(fig)
        return False
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return True


def _plot_accuracy_grid(table: pd.DataFrame, path: Path) -> bool:
    cells = table.dropna(subset=["alpha", "beta", "accuracy"])
    if cells.empty or cells[["alpha", "beta"]].drop_duplicates().shape[0] < 2:
        return False
    pivot = cells.pivot_table(index="alpha", columns="beta", values="accuracy", aggfunc="mean")
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(pivot.values, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(pivot.columns)), [f"beta={b:g}" for b in pivot.columns])
    ax.set_yticks(range(len(pivot.index)), [f"alpha={a:g}" for a in pivot.index])
    for i in range(pivot.shape[0]):
        for j in range(pivot.shape[1]):
            v = pivot.values[i, j]
            if np.isfinite(v):
                ax.text(j, i, f"{100 * v:.2f}%", ha="center", va="center", color="white")
    fig.colorbar(im, ax=ax, label="accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return True


def _plot_lattice_clusters(run: Path, path: Path) -> bool:
    lattice_file = run / "lattice.json"
    clusters_file = run / "clusters.json"
    if not (lattice_file.exists() and clusters_file.exists()):
        return False
    blob = io.read_json(lattice_file)
    lattice = SamplingLattice.from_dict(blob["lattice"])
    labels = np.array(io.read_json(clusters_file)["labels"])
    channels = len(labels) // lattice.n_kernels
    perm_file = run / "permutation.json"
    if perm_file.exists():
        mapping = np.array(io.read_json(perm_file)["mapping"])
        inverse = np.empty_like(mapping)
        inverse[mapping] = np.arange(len(mapping))
        kernel_cluster = labels[inverse[np.arange(lattice.n_kernels) * channels]]
    else:
        kernel_cluster = labels[np.arange(lattice.n_kernels) * channels]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(lattice.centers[:, 1], lattice.centers[:, 0], c=kernel_cluster,
               cmap="tab20", s=12 + 3 * lattice.sigmas)
    ax.invert_yaxis()
    ax.set_aspect("equal")
    ax.set_title("sampling lattice colored by cluster")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return True


def build_report(run_dirs: list[str | Path], out: str | Path) -> pd.DataFrame:
    """Write summary.csv and figures/ under ``out``; returns the tidy table."""
    run_dirs = [Path(r) for r in run_dirs]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    table = collect_run_rows(run_dirs)
    table.to_csv(out / "summary.csv", index=False)
    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    rendered = []
    if _plot_curves(run_dirs, "loss", "training loss", fig_dir / "loss_curves.png"):
        rendered.append("loss_curves.png")
    if _plot_curves(run_dirs, "alignment", "filter alignment", fig_dir / "alignment.png"):
        rendered.append("alignment.png")
    if _plot_accuracy_grid(table, fig_dir / "accuracy_grid.png"):
        rendered.append("accuracy_grid.png")
    for run in run_dirs:
        if _plot_lattice_clusters(run, fig_dir / f"lattice_{run.name}.png"):
            rendered.append(f"lattice_{run.name}.png")
    log.info("report: %d runs, figures: %s", len(table), ", ".join(rendered) or "none")
    return table
