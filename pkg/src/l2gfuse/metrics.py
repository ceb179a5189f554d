"""Greedy detection matching, 40-point interpolated AP and heading-weighted APH."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import Box7, iou_3d

__all__ = [
    "DEFAULT_IOU_THRESHOLDS",
    "Detection",
    "EvalFrame",
    "Match",
    "aph",
    "average_precision_40",
    "evaluate",
    "heading_error",
    "match_frame",
]

# vehicle, pedestrian, cyclist
DEFAULT_IOU_THRESHOLDS = {0: 0.7, 1: 0.5, 2: 0.5}
RECALL_POSITIONS = 40


@dataclass(frozen=True)
class Detection:
    box: Box7
    confidence: float
    label: int
    frame: int = 0


@dataclass
class EvalFrame:
    detections: list[Detection]
    ground_truth: list[tuple[Box7, int]]
    iou_thresholds: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_IOU_THRESHOLDS))

    def __post_init__(self) -> None:
        for d in self.detections:
            if not 0.0 <= d.confidence <= 1.0:
                raise ValueError(f"confidence {d.confidence} outside [0, 1]")
        for t in self.iou_thresholds.values():
            if not 0.0 < t < 1.0:
                raise ValueError(f"IoU threshold {t} outside (0, 1)")


@dataclass(frozen=True)
class Match:
    detection: Detection
    gt_index: Optional[int]
    heading_err: float = 0.0

    @property
    def is_tp(self) -> bool:
        return self.gt_index is not None


def heading_error(a: float, b: float) -> float:
    d = abs(a - b) % (2.0 * math.pi)
    return min(d, 2.0 * math.pi - d)


def match_frame(frame: EvalFrame) -> list[Match]:
    """Greedy matching in descending confidence order (stable for ties)."""
    order = sorted(range(len(frame.detections)), key=lambda i: -frame.detections[i].confidence)
    taken = [False] * len(frame.ground_truth)
    matches = []
    for i in order:
        det = frame.detections[i]
        thr = frame.iou_thresholds.get(det.label, 0.5)
        best, best_iou = None, -1.0
        for j, (gt_box, gt_label) in enumerate(frame.ground_truth):
            if taken[j] or gt_label != det.label:
                continue
            iou = iou_3d(det.box, gt_box)
            if iou >= thr and iou > best_iou:
                best, best_iou = j, iou
        if best is None:
            matches.append(Match(det, None))
        else:
            taken[best] = True
            matches.append(Match(det, best, heading_error(det.box.heading, frame.ground_truth[best][0].heading)))
    return matches


def _interpolated_ap(confidences: np.ndarray, tp_weights: np.ndarray, n_gt: int) -> float:
    if n_gt <= 0 or len(confidences) == 0:
        return 0.0
    order = np.argsort(-confidences, kind="stable")
    tp = np.cumsum(tp_weights[order])
    precision = tp / np.arange(1, len(order) + 1)
    recall = tp / n_gt
    # max precision at recall >= r, via a suffix maximum over the sorted curve
    suffix_max = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for j in range(1, RECALL_POSITIONS + 1):
        r = j / RECALL_POSITIONS
        reached = np.flatnonzero(recall >= r)
        if reached.size:
            total += suffix_max[reached[0]]
    return float(total / RECALL_POSITIONS)


def average_precision_40(matches: Iterable[Match], n_gt: int) -> float:
    matches = list(matches)
    conf = np.array([m.detection.confidence for m in matches], dtype=np.float64)
    w = np.array([1.0 if m.is_tp else 0.0 for m in matches])
    return _interpolated_ap(conf, w, n_gt)


def aph(matches: Iterable[Match], n_gt: int) -> float:
    """AP where each true positive counts ``1 - heading_err / pi``."""
    matches = list(matches)
    conf = np.array([m.detection.confidence for m in matches], dtype=np.float64)
    w = np.array([1.0 - m.heading_err / math.pi if m.is_tp else 0.0 for m in matches])
    return _interpolated_ap(conf, w, n_gt)


def evaluate(frames: Sequence[EvalFrame], labels: Sequence[int] = (0, 1, 2)) -> dict[int, dict[str, float]]:
    """Per-class AP/APH over a set of frames."""
    all_matches = [m for f in frames for m in match_frame(f)]
    out = {}
    for label in labels:
        ms = [m for m in all_matches if m.detection.label == label]
        n_gt = sum(1 for f in frames for _, g in f.ground_truth if g == label)
        out[label] = {"AP": average_precision_40(ms, n_gt), "APH": aph(ms, n_gt), "n_gt": n_gt, "n_det": len(ms)}
    return out
