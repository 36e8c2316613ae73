"""Focal classification loss plus smooth-L1 localization over matched boxes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, log_softmax, maximum, mul, record, reduce, scale, smooth_l1, sub

P_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0
    alpha: float = 1.0  # weight of the localization term

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")


@dataclass
class LossReport:
    cls: Tensor
    loc: Tensor
    total: Tensor
    num_positive: int

    def as_floats(self) -> dict:
        return {"cls": self.cls.item(), "loc": self.loc.item(), "total": self.total.item(),
                "num_positive": self.num_positive}


def focal_loss(p_t, gamma: float = 2.0):
    """-(1 - p_t)^gamma * log(p_t), elementwise, with p_t clamped at 1e-7 from below."""
    p = np.maximum(np.asarray(p_t, dtype=np.float64), P_CLAMP)
    if np.any(p > 1):
        raise ValueError("p_t must not exceed 1")
    out = -((1.0 - p) ** gamma) * np.log(p)
    return float(out) if out.ndim == 0 else out


def focal_from_log_prob(log_pt: Tensor, gamma: float) -> Tensor:
    """Elementwise focal term from log p_t, differentiable in log p_t."""
    lp = log_pt.data
    p = np.exp(lp)
    q = 1.0 - p
    qg = q ** gamma
    out = -qg * lp

    def backward(g):
        if gamma == 0:
            d = -np.ones_like(lp)
        else:
            # d/dl of -(1-e^l)^gamma * l
            # at p_t == 1 the log factor is 0, so the first term vanishes
            qg1 = np.where(q > 0, np.where(q > 0, q, 1.0) ** (gamma - 1), 0.0)
            d = gamma * p * qg1 * lp - qg
        return (g * d.astype(lp.dtype),)

    return record(out.astype(lp.dtype), (log_pt,), backward)


def classification_loss(cls_logits: Tensor, labels: np.ndarray, gamma: float) -> Tensor:
    """Mean focal loss over every default box in the batch.

    ``cls_logits`` is [N, B, Cls]; ``labels`` is an integer array [N, B].
    """
    n_cls = cls_logits.shape[-1]
    onehot = np.eye(n_cls, dtype=cls_logits.dtype)[labels]
    log_p = log_softmax(cls_logits, axis=-1)
    log_pt = reduce("sum", mul(log_p, onehot), axes=-1)
    log_pt = maximum(log_pt, math.log(P_CLAMP))
    per_box = focal_from_log_prob(log_pt, gamma)
    return reduce("mean", per_box)


def localization_loss(pred: Tensor, target: np.ndarray, positive: np.ndarray) -> tuple:
    """Smooth-L1 summed over coordinates, averaged over positive boxes: (loss, num_positive)."""
    npos = int(np.count_nonzero(positive))
    mask = np.broadcast_to(np.asarray(positive, dtype=pred.dtype)[..., None], pred.shape)
    diff = sub(pred, np.asarray(target, dtype=pred.dtype))
    total = reduce("sum", mul(smooth_l1(diff), np.ascontiguousarray(mask)))
    if npos == 0:
        return scale(total, 0.0), 0
    return scale(total, 1.0 / npos), npos


def total_loss(loc: Tensor, cls: Tensor, labels: np.ndarray, loc_targets: np.ndarray,
               config: LossConfig = LossConfig()) -> LossReport:
    cls_term = classification_loss(cls, labels, config.gamma)
    loc_term, npos = localization_loss(loc, loc_targets, labels > 0)
    return LossReport(cls_term, loc_term, add(cls_term, scale(loc_term, config.alpha)), npos)
