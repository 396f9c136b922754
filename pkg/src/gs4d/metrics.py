"""Evaluation suite: 3D scene-flow metrics, photometric/depth metrics and
segmentation metrics.

Acc5/Acc10 follow the standard scene-flow convention: a point counts as
accurate when its endpoint error is below an absolute threshold (0.05 / 0.1 m)
OR a relative threshold (5% / 10% of the ground-truth magnitude). Results are
sensitive to this convention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError

ANGLE_EPS = 1e-8
PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class FlowEvalResult:
    epe3d: float
    acc5: float       # percent
    acc10: float      # percent
    theta_err: float  # radians, mean over points with both norms >= 1e-8
    count: int
    theta_excluded: int = 0

    def as_dict(self) -> dict:
        return {"EPE": self.epe3d, "Acc5": self.acc5, "Acc10": self.acc10,
                "theta": self.theta_err, "count": self.count,
                "theta_excluded": self.theta_excluded}


@dataclass
class SegEvalResult:
    per_class_iou: np.ndarray
    miou: float
    accuracy: float
    confusion: np.ndarray

    def as_dict(self) -> dict:
        return {"mIoU": self.miou, "Acc": self.accuracy,
                "per_class_iou": [None if np.isnan(v) else float(v)
                                  for v in self.per_class_iou]}


def eval_flow(pred: np.ndarray, gt: np.ndarray) -> FlowEvalResult:
    """Endpoint error, threshold accuracies and angular error of 3D flow."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise DataError(f"flow arrays must both be (N, 3), got {pred.shape} / {gt.shape}")
    n = pred.shape[0]
    if n == 0:
        raise DataError("flow evaluation needs at least one point")
    err = np.linalg.norm(pred - gt, axis=-1)
    gt_norm = np.linalg.norm(gt, axis=-1)
    rel = np.where(gt_norm > 0, err / np.where(gt_norm > 0, gt_norm, 1.0), np.inf)
    acc5 = float(np.mean((err < 0.05) | (rel < 0.05)) * 100.0)
    acc10 = float(np.mean((err < 0.1) | (rel < 0.1)) * 100.0)
    pred_norm = np.linalg.norm(pred, axis=-1)
    ok = (pred_norm >= ANGLE_EPS) & (gt_norm >= ANGLE_EPS)
    if ok.any():
        cosang = np.sum(pred[ok] * gt[ok], axis=-1) / (pred_norm[ok] * gt_norm[ok])
        theta = float(np.mean(np.arccos(np.clip(cosang, -1.0, 1.0))))
    else:
        theta = 0.0
    return FlowEvalResult(epe3d=float(err.mean()), acc5=acc5, acc10=acc10,
                          theta_err=theta, count=n, theta_excluded=int(n - ok.sum()))


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """10 log10(1 / MSE) on unit dynamic range, capped at 99 dB."""
    if pred.shape != gt.shape:
        raise DataError("psnr: shape mismatch")
    mse = float(np.mean((np.asarray(pred, float) - np.asarray(gt, float)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _filter2d_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    # separable valid-mode correlation
    pad = len(k) // 2
    tmp = np.apply_along_axis(lambda m: np.convolve(m, k, mode="valid"), 0, img)
    out = np.apply_along_axis(lambda m: np.convolve(m, k, mode="valid"), 1, tmp)
    assert out.shape[0] == img.shape[0] - 2 * pad
    return out


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5) and
    the standard stabilizers on unit range; multi-channel inputs average over
    channels. Boundary pixels without a full window are excluded."""
    if pred.shape != gt.shape:
        raise DataError("ssim: shape mismatch")
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim == 3:
        return float(np.mean([ssim(pred[..., i], gt[..., i])
                              for i in range(pred.shape[2])]))
    if min(pred.shape) < SSIM_WINDOW:
        raise DataError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    k = _gaussian_kernel()
    mu_p = _filter2d_valid(pred, k)
    mu_g = _filter2d_valid(gt, k)
    var_p = _filter2d_valid(pred * pred, k) - mu_p ** 2
    var_g = _filter2d_valid(gt * gt, k) - mu_g ** 2
    cov = _filter2d_valid(pred * gt, k) - mu_p * mu_g
    num = (2 * mu_p * mu_g + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_p ** 2 + mu_g ** 2 + SSIM_C1) * (var_p + var_g + SSIM_C2)
    return float(np.mean(num / den))


def depth_rmse(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Root mean squared depth error over the valid mask, in meters."""
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise DataError("depth_rmse: shape mismatch")
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise DataError("depth_rmse: empty mask")
    diff = np.asarray(pred, float)[m] - np.asarray(gt, float)[m]
    return float(np.sqrt(np.mean(diff ** 2)))


def eval_seg(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int
             ) -> SegEvalResult:
    """Confusion matrix, per-class IoU, mIoU over classes present in either
    prediction or ground truth, and pixel accuracy."""
    pred = np.asarray(pred_labels).ravel()
    gt = np.asarray(gt_labels).ravel()
    if pred.shape != gt.shape:
        raise DataError("eval_seg: shape mismatch")
    if pred.min() < 0 or pred.max() >= num_classes or gt.min() < 0 or gt.max() >= num_classes:
        raise DataError(f"labels must lie in [0, {num_classes})")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (gt, pred), 1)
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.full(num_classes, np.nan)
    present = denom > 0
    iou[present] = tp[present] / denom[present]
    miou = float(np.mean(iou[present])) if present.any() else 0.0
    acc = float(tp.sum() / confusion.sum())
    return SegEvalResult(per_class_iou=iou, miou=miou, accuracy=acc, confusion=confusion)
