"""Figures written next to the CSV/JSON outputs of each CLI command."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .attention import dense_mask  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_linear_fits(fits: dict, path, xlabel="TFLOP", ylabel="relative metric change (%)"):
    """``fits`` maps a label to a :class:`LinearFit`."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, fit in fits.items():
        x = fit.points[:, 0]
        ax.scatter(x, fit.points[:, 1], label=f"{label} (slope {fit.slope:.3g})")
        grid = np.linspace(0, x.max() * 1.05, 50)
        ax.plot(grid, fit.predict(grid), lw=1)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_power_fits(fits: dict, path, xlabel="TFLOP", ylabel="metric"):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, fit in fits.items():
        x = fit.points[:, 0]
        ax.scatter(x, fit.points[:, 1], label=f"{label} (beta {fit.beta:.3g})")
        grid = np.geomspace(x.min() * 0.9, x.max() * 1.1, 50)
        ax.plot(grid, fit.predict(grid), lw=1)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_lbsl(rows: list, path):
    """Per-step balance ratio and mean realized load of LBSL against plain SL."""
    steps = [r["step"] for r in rows]
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    for key, label in (("sl", "SL"), ("lbsl", "LBSL")):
        a1.plot(steps, [r[key].max() / r[key].min() for r in rows], lw=0.8, label=label)
        a2.plot(steps, [r[key].mean() for r in rows], lw=0.8, label=label)
    a1.set_yscale("log")
    a1.set_ylabel("max/min rank load")
    a2.set_ylabel("mean rank load")
    a2.set_xlabel("step")
    a1.legend(fontsize=8)
    return _save(fig, path)


def plot_training(metrics: list, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    keys = sorted({(m["split"], m["task"]) for m in metrics})
    for split, task in keys:
        pts = [(m["step"], m["ne"]) for m in metrics if m["split"] == split and m["task"] == task]
        ax.plot(*zip(*pts), marker="o", ms=3, label=f"{split} task {task}")
    ax.axhline(1.0, color="grey", lw=0.8, ls="--")
    ax.set_xlabel("step")
    ax.set_ylabel("NE")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_flops(rows: list, path):
    """``rows`` of dicts with ``mask``, ``L`` and ``attention`` keys."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mask in dict.fromkeys(r["mask"] for r in rows):
        pts = [(r["L"], r["attention"]) for r in rows if r["mask"] == mask]
        ax.plot(*zip(*pts), marker="o", ms=3, label=mask)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("sequence length")
    ax.set_ylabel("attention FLOP per layer")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_mask(spec, L: int, path):
    fig, ax = plt.subplots(figsize=(3.5, 3.5))
    ax.imshow(dense_mask(spec, L), cmap="Greys", interpolation="nearest")
    ax.set_xlabel("key")
    ax.set_ylabel("query")
    return _save(fig, path)


def plot_quant_errors(report: dict, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    names = list(report)
    ax.bar(np.arange(len(names)) - 0.2, [report[n]["max_abs_error"] for n in names], 0.4, label="max |error|")
    ax.bar(np.arange(len(names)) + 0.2, [report[n]["max_half_scale"] for n in names], 0.4, label="max scale/2")
    ax.set_xticks(np.arange(len(names)), names)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_histogram(values, path, xlabel: str, bins: int = 40):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist(np.asarray(values, dtype=float), bins=bins, color="tab:blue")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    return _save(fig, path)
