"""Segmentation loss (cross entropy + log2 soft Dice) and evaluation metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.8
    dice_smooth: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be positive")


def soft_dice(pred_probs, target, smooth: float = 1.0) -> torch.Tensor:
    """``(2 sum(p g) + s) / (sum(p) + sum(g) + s)`` pooled over the whole batch."""
    p = torch.as_tensor(pred_probs)
    if not p.is_floating_point():
        p = p.double()
    g = torch.as_tensor(target).to(p.dtype)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {tuple(p.shape)} != target shape {tuple(g.shape)}")
    return (2 * (p * g).sum() + smooth) / (p.sum() + g.sum() + smooth)


def _check_dist(pred, target):
    if pred.dim() != target.dim() + 1 or pred.shape[1] != 2:
        raise ValueError(
            f"expected (B, 2, ...) predictions for (B, ...) targets; got {tuple(pred.shape)} "
            f"and {tuple(target.shape)}"
        )


def combined_loss(pred_probs, target, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """``lam * CE - (1 - lam) * log2(softDice)`` for a per-pixel 2-class distribution."""
    pred = torch.as_tensor(pred_probs)
    target = torch.as_tensor(target).long()
    _check_dist(pred, target)
    picked = pred.gather(1, target.unsqueeze(1)).squeeze(1)
    ce = -torch.log(picked.clamp_min(torch.finfo(pred.dtype).tiny)).mean()
    dice = soft_dice(pred[:, 1], target.to(pred.dtype), cfg.dice_smooth)
    return cfg.lam * ce - (1 - cfg.lam) * torch.log2(dice)


def combined_loss_from_logits(logits, target, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Same objective computed from raw logits with a stable log-softmax."""
    target = target.long()
    _check_dist(logits, target)
    ce = F.cross_entropy(logits, target)
    dice = soft_dice(torch.softmax(logits, dim=1)[:, 1], target.to(logits.dtype), cfg.dice_smooth)
    return cfg.lam * ce - (1 - cfg.lam) * torch.log2(dice)


@dataclass(frozen=True)
class SegScores:
    dice: float
    iou: float


def _binary(arr, name):
    arr = np.asarray(arr)
    if arr.dtype != bool:
        extra = set(np.unique(arr).tolist()) - {0, 1}
        if extra:
            raise ValueError(f"{name} is not binary; found values {sorted(extra)[:10]}")
    return arr.astype(bool)


def seg_scores(pred_mask, true_mask) -> SegScores:
    """Hard Dice and IoU; two empty masks score 1."""
    a = _binary(pred_mask, "pred_mask")
    b = _binary(true_mask, "true_mask")
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.logical_and(a, b).sum())
    total = int(a.sum()) + int(b.sum())
    union = total - inter
    if union == 0:
        return SegScores(1.0, 1.0)
    return SegScores(dice=2 * inter / total, iou=inter / union)


@dataclass(frozen=True)
class ClassificationReport:
    precision: float
    recall: float
    f1: float
    accuracy: float
    undefined: tuple[str, ...] = ()


def classification_report(pred_labels, true_labels) -> ClassificationReport:
    """Binary precision/recall/F1/accuracy with Implantation (1) as the positive class.

    Ratios with a zero denominator are reported as 0 and listed in ``undefined``.
    """
    pred = _binary(pred_labels, "pred_labels").ravel()
    true = _binary(true_labels, "true_labels").ravel()
    if pred.size == 0:
        raise ValueError("classification_report needs at least one label")
    if pred.shape != true.shape:
        raise ValueError("label sequences differ in length")
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    accuracy = float(np.mean(pred == true))
    return ClassificationReport(precision, recall, f1, accuracy, tuple(undefined))


def summarize(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def write_seg_scores_csv(rows: Iterable[tuple[str, SegScores]], path) -> dict:
    """Write ``image_id,dice,iou`` rows plus ``mean`` and ``std`` summary rows."""
    rows = list(rows)
    if not rows:
        raise ValueError("no scores to write")
    dice_mean, dice_std = summarize([s.dice for _, s in rows])
    iou_mean, iou_std = summarize([s.iou for _, s in rows])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "dice", "iou"])
        for image_id, s in rows:
            w.writerow([image_id, repr(s.dice), repr(s.iou)])
        w.writerow(["mean", repr(dice_mean), repr(iou_mean)])
        w.writerow(["std", repr(dice_std), repr(iou_std)])
    return {"dice_mean": dice_mean, "dice_std": dice_std, "iou_mean": iou_mean, "iou_std": iou_std,
            "n": len(rows)}

