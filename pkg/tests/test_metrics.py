"""Metric functions against hand cases and a brute-force oracle."""

import numpy as np

from auxnas.metrics import (
    metric_mean_angle,
    metric_miou,
    metric_pixel_acc,
    metric_rel,
    metric_rms,
)

IGNORE = 255


# --- independent brute-force reimplementation (the oracle) ---------------


def oracle_miou(pred, gt, k):
    ious = []
    for c in range(k):
        tp = fp = fn = 0
        for p, g in zip(pred.ravel(), gt.ravel()):
            if g == IGNORE:
                continue
            if p == c and g == c:
                tp += 1
            elif p == c:
                fp += 1
            elif g == c:
                fn += 1
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    return sum(ious) / len(ious) if ious else 0.0


def oracle_pixel_acc(pred, gt):
    ok = n = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        if g == IGNORE:
            continue
        n += 1
        ok += p == g
    return ok / n if n else 0.0


def oracle_rel(pred, gt):
    vals = [abs(p - g) / g for p, g in zip(pred.ravel(), gt.ravel())]
    return sum(vals) / len(vals)


def oracle_rms(pred, gt):
    vals = [(p - g) ** 2 for p, g in zip(pred.ravel(), gt.ravel())]
    return (sum(vals) / len(vals)) ** 0.5


def oracle_angle(pred, gt):
    pf = pred.reshape(3, -1)
    gf = gt.reshape(3, -1)
    total = 0.0
    for i in range(pf.shape[1]):
        d = float(np.dot(pf[:, i], gf[:, i]))
        d = max(-1.0, min(1.0, d))
        total += np.degrees(np.arccos(d))
    return total / pf.shape[1]


def unit_normals(rng, h, w):
    v = rng.standard_normal((3, h, w))
    return v / np.sqrt((v ** 2).sum(axis=0, keepdims=True))


class TestHandCases:
    def test_perfect_predictions(self):
        gt = np.array([[0, 1], [2, 3]])
        assert metric_miou(gt, gt, 5) == 1.0
        assert metric_pixel_acc(gt, gt) == 1.0
        d = np.array([1.0, 2.0, 3.0])
        assert metric_rel(d, d) == 0.0
        assert metric_rms(d, d) == 0.0
        n = np.zeros((3, 2, 2))
        n[2] = 1.0  # exactly unit, so the self-angle is exactly zero
        assert metric_mean_angle(n, n) == 0.0

    def test_two_class_example(self):
        gt = np.array([0, 0, 1, 1])
        pred = np.array([0, 1, 1, 1])
        assert abs(metric_miou(pred, gt, 2) - 7 / 12) < 1e-12
        assert metric_pixel_acc(pred, gt) == 0.75

    def test_absent_classes_excluded(self):
        gt = np.array([0, 0])
        pred = np.array([0, 0])
        # classes 1..4 appear in neither gt nor pred, so only class 0 counts
        assert metric_miou(pred, gt, 5) == 1.0

    def test_ignored_pixels_excluded(self):
        gt = np.array([0, IGNORE, 1])
        pred = np.array([0, 1, 0])
        assert metric_pixel_acc(pred, gt) == 0.5
        assert abs(metric_miou(pred, gt, 2) - 0.25) < 1e-12  # IoU0=1/2, IoU1=0

    def test_antipodal_angle(self):
        n = np.zeros((3, 1, 1))
        n[2] = 1.0
        assert abs(metric_mean_angle(-n, n) - 180.0) < 1e-9


class TestOracleEquivalence:
    def test_hundred_random_instances(self):
        rng = np.random.default_rng(2024)
        for i in range(100):
            k = int(rng.integers(2, 6))
            gt = rng.integers(0, k, size=(8, 8))
            gt[rng.random((8, 8)) < 0.1] = IGNORE
            pred = rng.integers(0, k, size=(8, 8))
            assert metric_miou(pred, gt, k) == oracle_miou(pred, gt, k)
            assert metric_pixel_acc(pred, gt) == oracle_pixel_acc(pred, gt)

            gt_d = rng.uniform(0.5, 4.0, size=(8, 8))
            pred_d = gt_d + rng.normal(0, 0.3, size=(8, 8))
            assert abs(metric_rel(pred_d, gt_d) - oracle_rel(pred_d, gt_d)) < 1e-12
            assert abs(metric_rms(pred_d, gt_d) - oracle_rms(pred_d, gt_d)) < 1e-12

            gt_n = unit_normals(rng, 8, 8)
            pred_n = unit_normals(rng, 8, 8)
            assert abs(metric_mean_angle(pred_n, gt_n) - oracle_angle(pred_n, gt_n)) < 1e-9
