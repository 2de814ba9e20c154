"""Figures written next to the tab-delimited outputs of the CLI."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .corpus import TYPE_LABELS, CorpusStats  # noqa: E402
from .evaluation import EvalReport  # noqa: E402
from .train import StepLog  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}
COLORS = {"whisper": "#c0392b", "normal": "#2c6fbb", "total": "#333333"}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    x = np.asarray(values, dtype=float)
    if window <= 1 or len(x) < window:
        return x
    kernel = np.ones(window) / window
    return np.convolve(x, kernel, mode="valid")


def plot_loss_curve(curve: Sequence[StepLog], path: str | Path, title: str | None = None) -> Path:
    """Per-step branch losses and their sum, lightly smoothed."""
    if not curve:
        raise ValueError("empty loss curve")
    window = max(1, len(curve) // 50)
    steps = np.array([s.step for s in curve])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for key, label in (("L_w", "whisper"), ("L_n", "normal"), ("L_total", "total")):
            y = moving_average([getattr(s, key) for s in curve], window)
            if not np.any(y > 0):
                continue  # branch disabled
            ax.plot(steps[len(steps) - len(y) :], y, label=key, color=COLORS[label], lw=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel("cross-entropy")
        ax.set_yscale("log")
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def plot_stats(stats: CorpusStats, path: str | Path) -> Path:
    """Bar chart of hours per (video, speech type) row."""
    labels = [f"{'V' if r.has_video else 'noV'}/{TYPE_LABELS[r.speech_type]}" for r in stats.rows]
    hours = [r.total_hours for r in stats.rows]
    colors = [COLORS[r.speech_type] for r in stats.rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        bars = ax.bar(labels, hours, color=colors)
        for bar, row in zip(bars, stats.rows):
            ax.annotate(
                str(row.num_utterances),
                (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                ha="center",
                va="bottom",
                fontsize=8,
            )
        ax.set_ylabel("hours")
        ax.set_title(f"{stats.split} split")
        return _save(fig, path)


def plot_error_histogram(report: EvalReport, path: str | Path) -> Path:
    """Distribution of per-utterance error rates, one series per speech type."""
    groups: dict[str, list[float]] = {}
    for s in report.per_utt:
        groups.setdefault(s.speech_type or "total", []).append(s.error_rate)
    top = max([1.0] + [max(v) for v in groups.values() if v])
    bins = np.linspace(0, top, 21)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, rates in sorted(groups.items()):
            ax.hist(rates, bins=bins, alpha=0.6, label=name, color=COLORS.get(name, COLORS["total"]))
        ax.set_xlabel(f"per-utterance {'CER' if report.unit == 'char' else 'WER'}")
        ax.set_ylabel("utterances")
        if groups:
            ax.legend()
        return _save(fig, path)
