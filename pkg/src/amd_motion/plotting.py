"""Report figures written next to the CSV/JSON outputs. PNGs are byte-reproducible."""
from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io_utils import atomic_write_bytes  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return atomic_write_bytes(path, buf.getvalue())


def plot_loss_history(histories: dict, path, window: int = 50):
    """One panel per component; raw loss in light grey, moving average on top."""
    histories = {k: v for k, v in histories.items() if v}
    fig, axes = plt.subplots(1, max(len(histories), 1), figsize=(4 * max(len(histories), 1), 3), squeeze=False)
    for ax, (name, rows) in zip(axes[0], histories.items()):
        y = np.array([r.get("total", r.get("loss")) for r in rows], dtype=np.float64)
        x = np.arange(len(y))
        ax.plot(x, y, color="0.8", lw=0.8)
        w = min(window, len(y))
        ax.plot(x[w - 1:], np.convolve(y, np.ones(w) / w, mode="valid"), color="C0")
        ax.set_yscale("log")
        ax.set_title(name)
        ax.set_xlabel("step")
    fig.tight_layout()
    return _save(fig, path)


def plot_metrics(report, path):
    keys = [k for k, v in report.metrics().items() if v is not None and np.isfinite(v)]
    fig, ax = plt.subplots(figsize=(6, 3))
    vals = [report.metrics()[k] for k in keys]
    errs = [report.intervals.get(k, 0.0) or 0.0 for k in keys]
    ax.bar(range(len(keys)), vals, yerr=errs, color="C1", capsize=3)
    ax.set_xticks(range(len(keys)), keys, rotation=20, fontsize=8)
    ax.set_title(f"{report.counts.get('generated', 0)} generated, {report.counts.get('reps', 0)} reps")
    fig.tight_layout()
    return _save(fig, path)


def plot_trajectory(positions: np.ndarray, boundaries, path, foot_joints=(7, 10, 8, 11)):
    """Top-down root path (x/z) and foot heights over time; segment boundaries dashed."""
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    a.plot(positions[:, 0, 0], positions[:, 0, 2], color="C0")
    for f in boundaries:
        a.plot(positions[f, 0, 0], positions[f, 0, 2], "o", color="C3", ms=3)
        b.axvline(f, color="0.6", ls="--", lw=0.8)
    a.set_aspect("equal", adjustable="datalim")
    a.set_xlabel("x")
    a.set_ylabel("z")
    for j in foot_joints:
        b.plot(positions[:, j, 1], lw=0.8, label=f"joint {j}")
    b.set_xlabel("frame")
    b.set_ylabel("height")
    b.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
