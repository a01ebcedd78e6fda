"""Figures written next to the JSON/CSV reports. Uses the Agg backend only."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_pr_curves(result, path, thresholds: Sequence[float] = (0.5, 0.75)) -> Path:
    """Precision/recall per class at a few IoU thresholds."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for (cls, thr), (rec, prec) in sorted(result.pr_curves.items()):
            if not any(abs(thr - t) < 1e-9 for t in thresholds) or len(rec) == 0:
                continue
            ax.step(rec, prec, where="post", label=f"class {cls} @ {thr:.2f}")
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title(f"mask AP {100 * result.mean_ap:.1f}")
        if ax.get_legend_handles_labels()[0]:
            ax.legend(loc="lower left")
        return _save(fig, path)


def plot_fit_trace(rows: Sequence[tuple], path, title: str = "") -> Path:
    arr = np.asarray(rows, dtype=np.float64)
    names = ("center", "size", "boundary", "seg", "total")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for i, name in enumerate(names, start=1):
            y = np.maximum(arr[:, i], 1e-12)
            ax.plot(arr[:, 0], y, lw=1.8 if name == "total" else 1.0, label=name)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        if title:
            ax.set_title(title)
        ax.legend(ncol=2)
        return _save(fig, path)


def plot_maps(center, seg, results, path, class_id: int = 0) -> Path:
    """Center heatmap, class probability and decoded instances for one class, side by side."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(9, 3))
        axes[0].imshow(center[class_id], cmap="magma", vmin=0, vmax=1)
        axes[0].set_title("center")
        axes[1].imshow(seg[class_id], cmap="gray", vmin=0, vmax=1)
        axes[1].set_title("segmentation")
        labels = np.zeros(seg.shape[1:], dtype=np.int32)
        k = 0
        for r in results:
            if r.class_id != class_id or r.mask.shape != labels.shape:
                continue
            k += 1
            labels[r.mask] = k
            if r.detection.box is not None:
                x1, y1, x2, y2 = r.detection.box
                axes[2].add_patch(plt.Rectangle((x1 - 0.5, y1 - 0.5), x2 - x1, y2 - y1, fill=False, lw=0.8, ec="w"))
            axes[2].plot(r.detection.center.x, r.detection.center.y, "w+", ms=5)
        axes[2].imshow(np.ma.masked_equal(labels, 0), cmap="tab20", interpolation="nearest")
        axes[2].set_facecolor("black")
        axes[2].set_title(f"{k} instances")
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        return _save(fig, path)


def plot_ablation(results: Mapping[str, object], path, metric: str = "AP50") -> Path:
    names = list(results)
    vals = [100 * (results[n].table_row()[metric] or 0.0) for n in names]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.8, 3))
        bars = ax.bar(names, vals, color=["#999999", "#4477aa", "#cc6677"][: len(names)])
        for b, v in zip(bars, vals):
            ax.text(b.get_x() + b.get_width() / 2, v, f"{v:.1f}", ha="center", va="bottom")
        ax.set_ylabel(f"{metric} (%)")
        return _save(fig, path)


def plot_bench(report: Mapping, path) -> Path:
    cases = [c for c in report.get("cases", []) if "median_ms" in c]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3))
        labels = [c["label"] for c in cases]
        ax.bar(labels, [c["median_ms"] for c in cases], label="median")
        ax.scatter(labels, [c["p95_ms"] for c in cases], color="k", marker="_", s=200, label="p95", zorder=3)
        if report.get("budget_ms"):
            ax.axhline(report["budget_ms"], color="r", lw=0.8, ls="--", label="budget")
        ax.set_ylabel("decode time (ms)")
        ax.legend()
        return _save(fig, path)
