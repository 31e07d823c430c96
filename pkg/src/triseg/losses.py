"""Segmentation losses, the combined training objective, and evaluation
metrics (per-class IoU, mIoU, FB-IoU) with an order-independent
accumulator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, InputError

DEFAULT_LAMBDA = 0.2
DICE_EPS = 1.0


def bce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixel-mean binary cross-entropy on logits (log-sum-exp stabilized)."""
    return torch.nn.functional.binary_cross_entropy_with_logits(
        logits, target.to(logits.dtype), reduction="mean"
    )


def dice_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - (2·Σpy + ε) / (Σp + Σy + ε) with p = sigmoid(logits), ε = 1."""
    p = torch.sigmoid(logits)
    y = target.to(logits.dtype)
    num = 2.0 * (p * y).sum() + DICE_EPS
    den = p.sum() + y.sum() + DICE_EPS
    return 1.0 - num / den


def total_loss(
    l_bce: torch.Tensor | float,
    l_dice: torch.Tensor | float,
    l_con: torch.Tensor | float,
    lam: float = DEFAULT_LAMBDA,
) -> torch.Tensor | float:
    """(1 - λ)(bce + dice) + λ·contrastive."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"lambda must lie in [0, 1], got {lam}")
    return (1.0 - lam) * (l_bce + l_dice) + lam * l_con


@dataclass(frozen=True)
class LossBreakdown:
    bce: float
    dice: float
    contrastive: float
    total: float
    lam: float


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def iou(pred: np.ndarray, target: np.ndarray) -> float:
    """Exact pixel IoU; both-empty counts as perfect agreement (1.0)."""
    if pred.shape != target.shape:
        raise InputError("prediction and target shapes differ")
    p = pred.astype(bool)
    t = target.astype(bool)
    union = int(np.logical_or(p, t).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, t).sum()) / union


def miou(per_class_ious: dict[int, float] | list[float]) -> float:
    """Unweighted mean of per-class IoUs."""
    values = list(per_class_ious.values()) if isinstance(per_class_ious, dict) else list(per_class_ious)
    if not values:
        raise InputError("mIoU over zero classes is undefined")
    return float(np.mean(values))


def fb_iou(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean of foreground IoU and background IoU."""
    return 0.5 * (iou(pred, target) + iou(~pred.astype(bool), ~target.astype(bool)))


class MetricAccumulator:
    """Per-class intersection/union sums plus foreground/background sums.

    Accumulation is a sum of counts, so it is associative and
    order-independent; classes are averaged only at report time.
    """

    def __init__(self) -> None:
        self._inter: dict[int, int] = {}
        self._union: dict[int, int] = {}
        self._fg = [0, 0]  # intersection, union
        self._bg = [0, 0]

    def add(self, class_id: int, pred: np.ndarray, target: np.ndarray) -> None:
        p = pred.astype(bool)
        t = target.astype(bool)
        inter = int(np.logical_and(p, t).sum())
        union = int(np.logical_or(p, t).sum())
        self._inter[class_id] = self._inter.get(class_id, 0) + inter
        self._union[class_id] = self._union.get(class_id, 0) + union
        self._fg[0] += inter
        self._fg[1] += union
        self._bg[0] += int(np.logical_and(~p, ~t).sum())
        self._bg[1] += int(np.logical_or(~p, ~t).sum())

    def per_class_iou(self) -> dict[int, float]:
        return {
            c: (self._inter[c] / self._union[c]) if self._union[c] else 1.0
            for c in sorted(self._inter)
        }

    def miou(self) -> float:
        return miou(self.per_class_iou())

    def fb_iou(self) -> float:
        fg = self._fg[0] / self._fg[1] if self._fg[1] else 1.0
        bg = self._bg[0] / self._bg[1] if self._bg[1] else 1.0
        return 0.5 * (fg + bg)
