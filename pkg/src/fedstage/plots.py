"""Matplotlib figure rendering for the CLI report path.

Figures are written next to their delimited counterparts: an ROC curve
beside each roc.csv and a metrics-vs-interval chart beside summary.csv.
Rendering uses the Agg backend so runs work headless, and avoids any
timestamped metadata so repeated runs produce identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_SAVE_KWARGS = {"dpi": 150, "metadata": {"Software": None}}


def save_roc_figure(curves, path, title: str = "ROC") -> None:
    """Render one or more ROC curves to a file.

    curves is a list of (label, points) pairs, points being (fpr, tpr)
    tuples as produced by the metrics module.
    """
    fig, ax = plt.subplots(figsize=(4.8, 4.2))
    for label, points in curves:
        ax.plot([p[0] for p in points], [p[1] for p in points], lw=1.6, label=label)
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="gray")
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)


def save_sweep_figure(rows, path, title: str = "Metrics by averaging interval") -> None:
    """Chart AUC/precision/sensitivity/specificity against the interval.

    rows is a list of (interval, auc, precision, sensitivity, specificity).
    """
    intervals = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(5.6, 3.8))
    for idx, name in ((1, "AUC"), (2, "Precision"), (3, "Sensitivity"), (4, "Specificity")):
        ax.plot(intervals, [r[idx] for r in rows], marker="o", ms=3.5, lw=1.2, label=name)
    ax.set_xlabel("Averaging interval (local epochs per round)")
    ax.set_ylabel("Metric value")
    ax.set_xticks(intervals)
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
