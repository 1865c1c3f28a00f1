"""Report figures written straight to files (non-interactive backend)."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsReport  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def loss_curve(losses: Sequence[float], lrs: Sequence[float] | None, path: str | Path) -> Path:
    """Training loss (log scale) with the learning rate on a twin axis."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = np.arange(len(losses))
    ax.plot(steps, losses, color="tab:blue", lw=1.2, label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if len(losses) and min(losses) > 0:
        ax.set_yscale("log")
    if lrs is not None and len(lrs):
        ax2 = ax.twinx()
        ax2.plot(steps, lrs, color="tab:orange", lw=1.0, ls="--", label="lr")
        ax2.set_ylabel("learning rate")
    ax.set_title("training loss")
    return _save(fig, path)


def bland_altman_plot(report: MetricsReport, label: int, path: str | Path) -> Path:
    rows = [r for r in report.rows if r.label == label]
    means = np.array([(r.pred_cm3 + r.true_cm3) / 2 for r in rows])
    diffs = np.array([r.pred_cm3 - r.true_cm3 for r in rows])
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(means, diffs, s=18, color="tab:blue")
    stats = report.bland_altman.get(label)
    if stats:
        for key, style in (("mean_diff", "-"), ("lower", "--"), ("upper", "--")):
            ax.axhline(stats[key], color="tab:red", ls=style, lw=1)
    ax.set_xlabel("mean volume (cm$^3$)")
    ax.set_ylabel("pred - true (cm$^3$)")
    ax.set_title(f"Bland-Altman, class {label}")
    return _save(fig, path)


def volume_scatter(report: MetricsReport, label: int, path: str | Path) -> Path:
    rows = [r for r in report.rows if r.label == label]
    vt = np.array([r.true_cm3 for r in rows])
    vp = np.array([r.pred_cm3 for r in rows])
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(vt, vp, s=18, color="tab:green")
    hi = float(max(vt.max(initial=0), vp.max(initial=0))) or 1.0
    ax.plot([0, hi], [0, hi], color="grey", lw=1, ls=":")
    stats = report.volumetrics.get(label)
    title = f"volumes, class {label}"
    if stats:
        title += f"  (r={stats['pearson_r']:.3f})"
    ax.set_title(title)
    ax.set_xlabel("reference (cm$^3$)")
    ax.set_ylabel("predicted (cm$^3$)")
    return _save(fig, path)


def dsc_boxplot(report: MetricsReport, path: str | Path) -> Path:
    data, names = [], []
    for k in report.classes:
        vals = [r.dsc for r in report.rows if r.label == k and r.present]
        if vals:
            data.append(vals)
            names.append(str(k))
    fig, ax = plt.subplots(figsize=(max(4, 0.4 * len(names) + 2), 3.5))
    if data:
        ax.boxplot(data)
        ax.set_xticks(range(1, len(names) + 1), names)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("class")
    ax.set_ylabel("DSC")
    finite = [r.hd_mm for r in report.rows if r.present and math.isfinite(r.hd_mm)]
    n_inf = sum(1 for r in report.rows if r.present and math.isinf(r.hd_mm))
    ax.set_title(f"DSC per class (mean {report.mean_dsc:.3f}; {n_inf} infinite HD, {len(finite)} finite)")
    return _save(fig, path)
