"""Center-distance detection metrics: mAP, mATE, mASE, mAOE.

Per class, detections from all frames are sorted by score and greedily
matched to the nearest unmatched ground truth of the same class in the same
frame (BEV center distance below the threshold).  AP interpolates precision
at 101 recall points, drops the points with recall <= 0.1, subtracts the
minimum precision 0.1 and renormalises.  TP errors are plain means over the
true positives at the 2 m threshold.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box3D, wrap_yaw
from .scenario import CLASS_NAMES


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    tp_threshold: float = 2.0
    classes: tuple[str, ...] = CLASS_NAMES
    min_recall: float = 0.1
    min_precision: float = 0.1

    def __post_init__(self):
        th = np.asarray(self.thresholds)
        if len(th) == 0 or (th <= 0).any() or (np.diff(th) <= 0).any():
            raise ValueError("thresholds must be positive and strictly ascending")
        if self.tp_threshold <= 0:
            raise ValueError("tp_threshold must be positive")


@dataclass
class Metrics:
    mAP: float
    mATE: float
    mASE: float
    mAOE: float
    per_class: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def bev_distance(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])


def scale_error(a: Box3D, b: Box3D) -> float:
    """1 - IoU of the two boxes after aligning centers and yaw."""
    inter = float(np.prod(np.minimum(a.dims, b.dims)))
    union = float(np.prod(a.dims)) + float(np.prod(b.dims)) - inter
    return 1.0 - inter / union


def yaw_error(a: Box3D, b: Box3D) -> float:
    return abs(wrap_yaw(a.yaw - b.yaw))


def _sorted_detections(dets: Sequence[Sequence[Box3D]], cls: int):
    """(frame, box) pairs of one class, by descending score; ties by center x, y, z then frame."""
    items = [(f, b) for f, frame in enumerate(dets) for b in frame if b.class_id == cls]
    items.sort(key=lambda fb: (-fb[1].score, fb[1].center[0], fb[1].center[1], fb[1].center[2], fb[0]))
    return items


def match_class(dets, gts, cls: int, threshold: float):
    """Greedy score-ordered matching; returns (tp flags, matched (det, gt) boxes, number of GT)."""
    gt_by_frame = [[g for g in frame if g.class_id == cls] for frame in gts]
    taken = [np.zeros(len(g), dtype=bool) for g in gt_by_frame]
    n_gt = sum(len(g) for g in gt_by_frame)
    tp, pairs = [], []
    for f, det in _sorted_detections(dets, cls):
        best, best_d = -1, math.inf
        for j, g in enumerate(gt_by_frame[f]):
            if taken[f][j]:
                continue
            d = bev_distance(det, g)
            if d < best_d:
                best, best_d = j, d
        if best >= 0 and best_d < threshold:
            taken[f][best] = True
            tp.append(True)
            pairs.append((det, gt_by_frame[f][best]))
        else:
            tp.append(False)
    return np.array(tp, dtype=bool), pairs, n_gt


def precision_recall(tp: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    return ctp / np.maximum(ctp + cfp, 1), ctp / max(n_gt, 1)


def average_precision(tp: np.ndarray, n_gt: int, cfg: EvalConfig = EvalConfig()) -> float:
    if n_gt == 0 or len(tp) == 0 or not tp.any():
        return 0.0
    prec, rec = precision_recall(tp, n_gt)
    grid = np.linspace(0.0, 1.0, 101)
    p = np.interp(grid, rec, prec, right=0.0)
    p = p[round(100 * cfg.min_recall) + 1:] - cfg.min_precision
    p[p < 0] = 0.0
    # clip guards the rounding of a perfect curve just above 1
    return float(min(p.mean() / (1.0 - cfg.min_precision), 1.0))


def evaluate(dets: Sequence[Sequence[Box3D]], gts: Sequence[Sequence[Box3D]],
             cfg: EvalConfig = EvalConfig()) -> Metrics:
    """Metrics over aligned per-frame detection and ground-truth lists.

    Classes without ground truth are excluded from the means; a class with
    ground truth but no true positive contributes TP errors of 1.
    """
    if len(dets) != len(gts):
        raise ValueError("detections and ground truth must cover the same frames")
    per_class = {}
    for cls, name in enumerate(cfg.classes):
        n_gt = sum(1 for frame in gts for g in frame if g.class_id == cls)
        if n_gt == 0:
            continue
        aps = [average_precision(match_class(dets, gts, cls, th)[0], n_gt, cfg) for th in cfg.thresholds]
        _, pairs, _ = match_class(dets, gts, cls, cfg.tp_threshold)
        if pairs:
            ate = float(np.mean([bev_distance(d, g) for d, g in pairs]))
            ase = float(np.mean([scale_error(d, g) for d, g in pairs]))
            aoe = float(np.mean([yaw_error(d, g) for d, g in pairs]))
        else:
            ate = ase = aoe = 1.0
        per_class[name] = {"AP": float(np.mean(aps)), "ATE": ate, "ASE": ase, "AOE": aoe,
                           "AP_by_threshold": {str(th): ap for th, ap in zip(cfg.thresholds, aps)}}
    if not per_class:
        return Metrics(0.0, 0.0, 0.0, 0.0, {})
    vals = list(per_class.values())
    return Metrics(float(np.mean([v["AP"] for v in vals])), float(np.mean([v["ATE"] for v in vals])),
                   float(np.mean([v["ASE"] for v in vals])), float(np.mean([v["AOE"] for v in vals])),
                   per_class)
