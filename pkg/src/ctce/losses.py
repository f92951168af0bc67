"""Detection losses and prediction-to-ground-truth target assignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .assignment import gated_assignment
from .geometry import Box3D
from .numerics import Tensor
from .numerics import tensor as T


@dataclass(frozen=True)
class Stage1LossConfig:
    alpha: float = 2.0
    beta: float = 0.25
    gamma: float = 2.0
    alpha_bal: float = 0.25
    delta: float = 1.0
    # target assignment cost weights and the center-L1 gate beyond which a pair is a negative
    lambda_cls: float = 1.0
    lambda_box: float = 1.0
    assign_gate: float = 4.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("loss weights must be positive")
        if self.gamma < 0 or not 0 < self.alpha_bal < 1 or self.delta <= 0:
            raise ValueError("invalid focal / smooth-L1 parameters")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def assignment_cost(logits: np.ndarray, centers: np.ndarray, gts: Sequence[Box3D],
                    lambda_cls: float = 1.0, lambda_box: float = 1.0) -> np.ndarray:
    """``(N_pred, N_gt)`` cost: lambda_cls (1 - p[gt class]) + lambda_box |center - gt center|_1."""
    logits = np.asarray(logits, dtype=np.float64).reshape(len(centers), -1)
    if not gts or len(centers) == 0:
        return np.zeros((len(centers), len(gts)))
    gc = np.stack([g.center for g in gts])
    cls = np.array([g.class_id for g in gts])
    p = _sigmoid(logits[:, cls])
    l1 = np.abs(np.asarray(centers)[:, None, :] - gc[None, :, :]).sum(-1)
    return lambda_cls * (1.0 - p) + lambda_box * l1


def assign_targets(logits: np.ndarray, centers: np.ndarray, gts: Sequence[Box3D],
                   cfg: Stage1LossConfig = Stage1LossConfig()):
    """One-to-one Hungarian assignment; pairs whose center L1 exceeds the gate become negatives.

    Returns ``(pairs, unmatched_preds, unmatched_gts)`` like :func:`gated_assignment`.
    """
    n = len(centers)
    if not gts or n == 0:
        return np.zeros((0, 2), dtype=np.int64), np.arange(n), np.arange(len(gts))
    cost = assignment_cost(logits, centers, gts, cfg.lambda_cls, cfg.lambda_box)
    pairs, up, ug = gated_assignment(cost, np.inf)
    if len(pairs):
        gc = np.stack([gts[j].center for j in pairs[:, 1]])
        far = np.abs(np.asarray(centers)[pairs[:, 0]] - gc).sum(-1) > cfg.assign_gate
        if far.any():
            up = np.sort(np.concatenate([up, pairs[far, 0]]))
            ug = np.sort(np.concatenate([ug, pairs[far, 1]]))
            pairs = pairs[~far]
    return pairs, up, ug


def focal_loss(logits, targets: np.ndarray, gamma: float = 2.0, alpha_bal: float = 0.25) -> Tensor:
    """Sigmoid focal loss summed over classes and averaged over queries.

    ``targets`` is a 0/1 array shaped like ``logits``.
    """
    x = T.as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if x.size == 0:
        return Tensor(0.0)
    p = T.sigmoid(x)
    pos = T.power(1.0 - p, gamma) * T.log_sigmoid(x) if gamma else T.log_sigmoid(x)
    neg = T.power(p, gamma) * T.log_sigmoid(-x) if gamma else T.log_sigmoid(-x)
    per = -(alpha_bal * y) * pos - ((1.0 - alpha_bal) * (1.0 - y)) * neg
    return T.tsum(per) / float(x.shape[0])


def smooth_l1_loss(pred, target, delta: float = 1.0) -> Tensor:
    """Smooth-L1 summed over components and averaged over rows."""
    pred = T.as_tensor(pred)
    if pred.size == 0:
        return Tensor(0.0)
    diff = pred - Tensor(np.asarray(target, dtype=np.float64))
    rows = pred.shape[0] if pred.ndim > 1 else 1
    return T.tsum(T.smooth_l1(diff, delta)) / float(rows)


def mse_loss(pred, target) -> Tensor:
    """Mean over every element."""
    pred = T.as_tensor(pred)
    if pred.size == 0:
        return Tensor(0.0)
    diff = pred - Tensor(np.asarray(target, dtype=np.float64))
    return T.mean(diff * diff)


def regression_targets(ref_points: np.ndarray, gts: Sequence[Box3D]) -> np.ndarray:
    """Per pair: center offset from ref_point, log dims, sin yaw, cos yaw."""
    out = np.zeros((len(gts), 8))
    for k, (r, g) in enumerate(zip(ref_points, gts)):
        out[k, :3] = g.center - r
        out[k, 3:6] = np.log(g.dims)
        out[k, 6] = np.sin(g.yaw)
        out[k, 7] = np.cos(g.yaw)
    return out


def stage1_loss(logits: Tensor, reg: Tensor, ref_points: np.ndarray, gts: Sequence[Box3D],
                cfg: Stage1LossConfig = Stage1LossConfig()):
    """alpha * focal over all queries + beta * smooth-L1 over matched pairs.

    Returns ``(loss, pairs)``; the assignment is a constant of the step.
    """
    n = logits.shape[0]
    centers = ref_points + reg.data[:, :3] if n else np.zeros((0, 3))
    pairs, _, _ = assign_targets(logits.data, centers, gts, cfg)
    targets = np.zeros(logits.shape)
    for i, j in pairs:
        targets[i, gts[j].class_id] = 1.0
    loss = cfg.alpha * focal_loss(logits, targets, cfg.gamma, cfg.alpha_bal)
    if len(pairs):
        rt = regression_targets(ref_points[pairs[:, 0]], [gts[j] for j in pairs[:, 1]])
        loss = loss + cfg.beta * smooth_l1_loss(T.take_rows(reg, pairs[:, 0]), rt, cfg.delta)
    return loss, pairs


def stage2_loss(predicted, true) -> Tensor:
    return mse_loss(predicted, true)
