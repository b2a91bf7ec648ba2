"""Run reports: key=value metrics, human-readable text, matplotlib figures."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import MemoryReport


def write_key_values(path, values: dict) -> None:
    """Machine-readable `key=value` lines, sorted by key."""
    lines = [f"{k}={values[k]}" for k in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_text_report(path, title: str, values: dict) -> None:
    width = max((len(k) for k in values), default=10)
    lines = [title, "=" * len(title)]
    for k in sorted(values):
        lines.append(f"{k.ljust(width)}  {values[k]}")
    Path(path).write_text("\n".join(lines) + "\n")


def plot_trajectory(path, estimated, truth=None) -> None:
    """Top-down and lateral views of the estimated (and truth) trajectory."""
    est = np.array([p.translation for _, p in estimated])
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, (a, b), name in zip(axes, ((0, 2), (0, 1)), ("top-down (x-z)", "lateral (x-y)")):
        ax.plot(est[:, a], est[:, b], "-", color="tab:blue", label="estimated")
        if truth is not None:
            gt = np.array([p.translation for _, p in truth])
            ax.plot(gt[:, a], gt[:, b], "--", color="tab:orange", label="ground truth")
        ax.set_xlabel("xyz"[a] + " [m]")
        ax.set_ylabel("xyz"[b] + " [m]")
        ax.set_title(name)
        ax.axis("equal")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_iou_curve(path, values) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(range(len(values)), values, "-o", markersize=3)
    ax.set_xlabel("frame")
    ax.set_ylabel("reprojected IoU")
    ax.set_ylim(0.0, 1.05)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_memory(path, report: MemoryReport) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    mb = 1.0 / (1024 * 1024)
    bars = ax.bar(
        ["instance-based", "per-surfel"],
        [report.instance_based_bytes * mb, report.per_element_bytes * mb],
        color=["tab:green", "tab:red"],
    )
    ax.bar_label(bars, fmt="%.2f MB")
    ax.set_ylabel("class-probability storage [MB]")
    ax.set_title(f"ratio = {report.ratio * 100:.2f}%")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(path, rows) -> None:
    """Bar chart of ATE per omega setting; failed rows drawn hatched at 0."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    labels = [f"{r['omega_rgb']:g}" for r in rows]
    values = [r.get("ate_rmse") for r in rows]
    heights = [v if v is not None else 0.0 for v in values]
    bars = ax.bar(labels, heights, color="tab:blue")
    for bar, v in zip(bars, values):
        if v is None:
            bar.set_hatch("//")
            bar.set_color("tab:red")
    ax.set_xlabel("omega_rgb")
    ax.set_ylabel("ATE RMSE [m]")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_ablation_csv(path, rows) -> None:
    lines = ["omega_rgb,ate_rmse,recon_mean,status"]
    for r in rows:
        ate = "" if r.get("ate_rmse") is None else f"{r['ate_rmse']:.9f}"
        recon = "" if r.get("recon_mean") is None else f"{r['recon_mean']:.9f}"
        lines.append(f"{r['omega_rgb']:g},{ate},{recon},{r['status']}")
    Path(path).write_text("\n".join(lines) + "\n")
