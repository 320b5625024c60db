"""Evaluation metrics: mask IoU, HDR MSE, LDR PSNR and the thresholding baseline."""
from __future__ import annotations

import math

import numpy as np

PSNR_CAP = 99.0


def metric_iou(pred, gt) -> float:
    """Intersection over union of two boolean masks (1.0 when both are empty)."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError("mask shapes differ")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def metric_mse_hdr(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("image shapes differ")
    return float(np.mean((pred - gt) ** 2))


def metric_psnr_ldr(pred, gt) -> float:
    """PSNR in dB for images in [0, 1]; identical images report the cap."""
    mse = metric_mse_hdr(pred, gt)
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


THRESHOLDS = np.round(np.arange(0.01, 1.0 + 1e-9, 0.01), 2)


def threshold_baseline(images, masks, thresholds=THRESHOLDS, reduce: str = "max"):
    """Best IoU of ``reduce_rgb(image) >= t`` over the threshold sweep.

    ``images`` and ``masks`` are matching sequences (one LDR image per view);
    the IoU is computed over all pixels of all views at once.  Returns
    ``(best_iou, best_threshold)``.
    """
    red = {"max": np.max, "mean": np.mean}[reduce]
    values = np.concatenate([red(np.asarray(im, dtype=np.float64), axis=-1).ravel() for im in images])
    gt = np.concatenate([np.asarray(m, dtype=bool).ravel() for m in masks])
    best, best_t = -1.0, float(thresholds[0])
    for t in thresholds:
        iou = metric_iou(values >= t, gt)
        if iou > best:
            best, best_t = iou, float(t)
    return best, best_t


def emission_threshold_masks(strength_maps, threshold: float):
    """Baseline masks from composited emission strength (per-view maps)."""
    return [np.asarray(s) >= threshold for s in strength_maps]
