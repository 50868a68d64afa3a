"""PNG figures written next to the CSV outputs.

Uses ``matplotlib.figure.Figure`` directly so no pyplot state or GUI backend
is involved; safe inside worker processes.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

from matplotlib.figure import Figure
from matplotlib.ticker import MaxNLocator

from .evaluation import Segment, pr_curve

_STYLE = {"linewidth": 1.4}


def _read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(v: str):
    return float(v) if v not in ("", None) else None


def _legend(ax) -> None:
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=7, frameon=False)


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path


def plot_metrics(metrics_csv, out_png=None) -> Path:
    """Loss components and validation AP against training step."""
    rows = _read_csv(metrics_csv)
    steps = [int(r["step"]) for r in rows]
    fig = Figure(figsize=(9, 3.6))
    ax_loss, ax_ap = fig.subplots(1, 2)
    for key in ("L_total", "L_frame", "L_video", "L_adv", "L_orth"):
        ax_loss.plot(steps, [_num(r[key]) for r in rows], label=key, **_STYLE)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("epoch-mean loss")
    ax_loss.set_yscale("symlog", linthresh=1e-3)
    _legend(ax_loss)
    for key in ("val_AP50", "val_AP75", "val_AP95"):
        pts = [(s, _num(r[key])) for s, r in zip(steps, rows) if _num(r[key]) is not None]
        if pts:
            ax_ap.plot(*zip(*pts), marker="o", markersize=3, label=key, **_STYLE)
    for ax in (ax_loss, ax_ap):
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax_ap.set_xlabel("step")
    ax_ap.set_ylabel("validation AP")
    ax_ap.set_ylim(0, 1.02)
    _legend(ax_ap)
    return _save(fig, out_png or Path(metrics_csv).with_suffix(".png"))


def plot_tau_sweep(sweep_csv, out_png=None) -> Path:
    rows = sorted(_read_csv(sweep_csv), key=lambda r: float(r["tau"]))
    taus = [float(r["tau"]) for r in rows]
    fig = Figure(figsize=(4.8, 3.6))
    ax = fig.subplots()
    for key in ("AP50", "AP75", "AP95", "mAP"):
        ax.plot(taus, [float(r[key]) for r in rows], marker="o", markersize=4, label=key, **_STYLE)
    ax.set_xlabel(r"semantic graph threshold $\tau$")
    ax.set_ylabel("validation AP")
    ax.set_ylim(0, 1.02)
    _legend(ax)
    return _save(fig, out_png or Path(sweep_csv).with_suffix(".png"))


def plot_pr_curves(preds: Sequence[Segment], gts: Sequence[Segment], thresholds: Sequence[float],
                   out_png) -> Path:
    fig = Figure(figsize=(4.8, 3.6))
    ax = fig.subplots()
    for thr in thresholds:
        if gts and preds:
            precision, recall = pr_curve(preds, gts, thr)
            ax.step(recall, precision, where="post", label=f"tIoU {thr:g}", **_STYLE)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    _legend(ax)
    return _save(fig, out_png)
