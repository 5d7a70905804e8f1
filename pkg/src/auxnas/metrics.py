"""Evaluation metrics for the three dense-prediction tasks.

All functions take plain numpy arrays (any leading batch axes), exclude
ignored pixels, and return python floats.
"""

from __future__ import annotations

import numpy as np

from .data import IGNORE_LABEL


def metric_miou(pred: np.ndarray, gt: np.ndarray, k: int,
                ignore: int = IGNORE_LABEL) -> float:
    """Mean IoU over classes present in gt or pred (ignored pixels excluded)."""
    valid = gt != ignore
    p = pred[valid]
    g = gt[valid]
    ious = []
    for c in range(k):
        in_p = p == c
        in_g = g == c
        union = int(in_p.sum() + in_g.sum() - (in_p & in_g).sum())
        if union == 0:
            continue
        ious.append((in_p & in_g).sum() / union)
    return float(np.mean(ious)) if ious else 0.0


def metric_pixel_acc(pred: np.ndarray, gt: np.ndarray,
                     ignore: int = IGNORE_LABEL) -> float:
    valid = gt != ignore
    total = int(valid.sum())
    if total == 0:
        return 0.0
    return float((pred[valid] == gt[valid]).sum() / total)


def metric_rel(pred_d: np.ndarray, gt_d: np.ndarray) -> float:
    """Mean absolute relative depth error, as a fraction (not percent)."""
    return float(np.mean(np.abs(pred_d - gt_d) / gt_d))


def metric_rms(pred_d: np.ndarray, gt_d: np.ndarray) -> float:
    return float(np.sqrt(np.mean((pred_d - gt_d) ** 2)))


def metric_mean_angle(pred_n: np.ndarray, gt_n: np.ndarray) -> float:
    """Mean angular error in degrees between unit normal fields.

    The channel axis is the third from the end ((..., 3, H, W)).
    """
    dot = np.clip((pred_n * gt_n).sum(axis=-3), -1.0, 1.0)
    return float(np.degrees(np.arccos(dot)).mean())


METRICS_FOR_KIND = {
    "seg": ("miou", "pixacc"),
    "depth": ("rel", "rms"),
    "normal": ("angle",),
}

PRIMARY_METRIC = {"seg": "miou", "depth": "rel", "normal": "angle"}

# reward normalization kinds per metric (see search.compute_reward)
METRIC_REWARD_KIND = {"miou": "higher", "pixacc": "higher",
                      "rel": "lower", "rms": "lower", "angle": "angle"}


def task_metrics(kind: str, pred: np.ndarray, gt: np.ndarray, k: int) -> dict[str, float]:
    """All metrics for one task kind from stacked predictions and labels."""
    if kind == "seg":
        labels = pred.argmax(axis=1)
        return {"miou": metric_miou(labels, gt, k),
                "pixacc": metric_pixel_acc(labels, gt)}
    if kind == "depth":
        return {"rel": metric_rel(pred, gt), "rms": metric_rms(pred, gt)}
    if kind == "normal":
        return {"angle": metric_mean_angle(pred, gt)}
    raise ValueError(f"unknown task kind {kind!r}")
