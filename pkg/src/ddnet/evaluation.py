"""Segment extraction, tIoU and average precision for temporal localization."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import EvalParams
from .data import label_runs


@dataclass(frozen=True)
class Segment:
    start: int  # inclusive frame index
    end: int    # exclusive
    score: float = 1.0
    video_id: str = ""

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid segment [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


def extract_segments(probs, theta: float = 0.5, min_len: int = 2, max_gap: int = 1,
                     video_id: str = "") -> list[Segment]:
    """Threshold frame probabilities into scored segments.

    Runs of frames with ``prob >= theta`` are merged across gaps of at most
    ``max_gap`` frames; merged runs shorter than ``min_len`` are dropped.
    The score is the mean probability over all frames of the segment.
    """
    probs = np.asarray(probs, dtype=np.float64)
    runs = label_runs(probs >= theta)
    merged: list[list[int]] = []
    for a, b in runs:
        if merged and a - merged[-1][1] <= max_gap:
            merged[-1][1] = b
        else:
            merged.append([a, b])
    return [Segment(a, b, float(probs[a:b].mean()), video_id) for a, b in merged if b - a >= min_len]


def gt_segments(frame_labels, video_id: str = "") -> list[Segment]:
    return [Segment(a, b, 1.0, video_id) for a, b in label_runs(frame_labels)]


def tiou(a: Segment, b: Segment) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    return inter / (a.length + b.length - inter)


def match_predictions(preds: Sequence[Segment], gts: Sequence[Segment], threshold: float):
    """Greedy matching in descending-score order. Returns (sorted preds, TP flags, matched gt index)."""
    order = sorted(preds, key=lambda p: (-p.score, p.video_id, p.start, p.end))
    by_video: dict[str, list[int]] = {}
    for i, g in enumerate(gts):
        by_video.setdefault(g.video_id, []).append(i)
    used: set[int] = set()
    flags, assigned = [], []
    for p in order:
        best, best_iou = None, -1.0
        for i in by_video.get(p.video_id, ()):
            if i in used:
                continue
            iou = tiou(p, gts[i])
            if iou > best_iou:
                best, best_iou = i, iou
        if best is not None and best_iou >= threshold:
            used.add(best)
            flags.append(True)
            assigned.append(best)
        else:
            flags.append(False)
            assigned.append(None)
    return order, flags, assigned


def ap_from_pr(precision: np.ndarray, recall: np.ndarray) -> float:
    """All-point interpolated AP (area under the precision envelope)."""
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def average_precision(preds: Sequence[Segment], gts: Sequence[Segment], threshold: float) -> float:
    if not gts:
        return 0.0 if preds else 1.0
    if not preds:
        return 0.0
    return ap_from_pr(*pr_curve(preds, gts, threshold))


def pr_curve(preds: Sequence[Segment], gts: Sequence[Segment], threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall after each ranked prediction."""
    if not gts:
        raise ValueError("precision/recall undefined without ground truth")
    gts = sorted(gts, key=lambda g: (g.video_id, g.start, g.end))
    _, flags, _ = match_predictions(preds, gts, threshold)
    tp = np.cumsum(flags, dtype=np.float64)
    return tp / np.arange(1, len(flags) + 1), tp / len(gts)


@dataclass
class EvalReport:
    ap: dict[str, float]
    mAP: float
    n_gt: int
    n_pred: int
    params: dict
    segments: dict[str, list[tuple[int, int, float]]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def table(self) -> str:
        keys = sorted(self.ap, key=float)
        head = "  ".join(f"AP@{k:<5}" for k in keys) + "  mAP"
        vals = "  ".join(f"{self.ap[k]:<8.4f}" for k in keys) + f"  {self.mAP:.4f}"
        return f"{head}\n{vals}\n(gt segments: {self.n_gt}, predicted: {self.n_pred})"

    def ap_at(self, thr: float) -> float:
        return self.ap[f"{thr:g}"]


def evaluate_probs(video_ids: Sequence[str], probs: Iterable, frame_labels: Iterable,
                   params: EvalParams | None = None) -> EvalReport:
    params = params or EvalParams()
    preds: list[Segment] = []
    gts: list[Segment] = []
    per_video = {}
    for vid, p, y in zip(video_ids, probs, frame_labels):
        segs = extract_segments(p, params.theta, params.min_len, params.max_gap, vid)
        preds += segs
        gts += gt_segments(y, vid)
        per_video[vid] = [(s.start, s.end, s.score) for s in segs]
    ap = {f"{t:g}": average_precision(preds, gts, t) for t in params.thresholds}
    return EvalReport(ap=ap, mAP=float(np.mean(list(ap.values()))), n_gt=len(gts), n_pred=len(preds),
                      params=asdict(params), segments=per_video)


def write_predictions_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video_id", "start", "end", "score"])
        for vid in sorted(report.segments):
            for a, b, s in report.segments[vid]:
                w.writerow([vid, a, b, repr(float(s))])
