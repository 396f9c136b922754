"""Training objectives and the composite total.

Every loss returns (value, gradient) with the gradient taken w.r.t. the
prediction argument. Reductions: RGB/semantic MSE are means over all
pixels and channels; the motion regularizer is a mean over Gaussians of the
summed squared coefficient norms.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .errors import DataError
from .motion import motion_coefficient

PerceptualFn = Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]]


@dataclass
class LossWeights:
    lam_lpips: float = 0.05
    lam_sky: float = 0.1
    lam_reg: float = 0.005
    lam_feat: float = 1.0
    feat_mode: str = "sem"  # "sem" or "cls"

    def __post_init__(self):
        if self.feat_mode not in ("sem", "cls"):
            raise DataError(f"feat_mode must be 'sem' or 'cls', got {self.feat_mode!r}")
        for name in ("lam_lpips", "lam_sky", "lam_reg", "lam_feat"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be non-negative")


def zero_perceptual(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, np.ndarray]:
    """Stand-in perceptual term: identically zero."""
    return 0.0, np.zeros_like(pred)


def gradient_perceptual(pred: np.ndarray, gt: np.ndarray,
                        scales: Tuple[int, ...] = (1, 2, 4)) -> Tuple[float, np.ndarray]:
    """Multi-scale image-gradient-difference proxy for a learned perceptual
    loss: mean squared difference of forward-difference gradients at several
    downsampling factors. Smooth and analytically differentiable."""
    total = 0.0
    grad = np.zeros_like(pred)
    for f in scales:
        p = _avgpool(pred, f)
        g = _avgpool(gt, f)
        val = 0.0
        dp = np.zeros_like(p)
        for axis in (0, 1):
            gx_p = np.diff(p, axis=axis)
            gx_g = np.diff(g, axis=axis)
            diff = gx_p - gx_g
            val += float(np.mean(diff ** 2))
            dd = 2.0 * diff / diff.size
            # adjoint of diff along `axis`
            pad = [(0, 0)] * p.ndim
            lead = [(1, 0) if a == axis else (0, 0) for a in range(p.ndim)]
            trail = [(0, 1) if a == axis else (0, 0) for a in range(p.ndim)]
            dp += np.pad(dd, lead) - np.pad(dd, trail)
        total += val
        grad += _avgpool_adjoint(dp, f, pred.shape)
    return total, grad


def _avgpool(img: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return img
    H, W = img.shape[:2]
    h, w = H // f, W // f
    img = img[: h * f, : w * f]
    return img.reshape(h, f, w, f, *img.shape[2:]).mean(axis=(1, 3))


def _avgpool_adjoint(d: np.ndarray, f: int, shape) -> np.ndarray:
    out = np.zeros(shape)
    if f == 1:
        return d
    h, w = d.shape[:2]
    up = np.repeat(np.repeat(d, f, axis=0), f, axis=1) / (f * f)
    out[: h * f, : w * f] += up
    return out


def loss_rgb(pred: np.ndarray, gt: np.ndarray,
             perceptual: Optional[PerceptualFn] = None,
             lam_lpips: float = 0.05) -> Tuple[float, np.ndarray]:
    """Pixel-wise MSE plus a weighted perceptual term."""
    if pred.shape != gt.shape:
        raise DataError(f"image shape mismatch: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    val = float(np.mean(diff ** 2))
    grad = 2.0 * diff / diff.size
    if perceptual is not None and lam_lpips != 0:
        pval, pgrad = perceptual(pred, gt)
        val += lam_lpips * pval
        grad = grad + lam_lpips * pgrad
    return val, grad


def loss_depth(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray
               ) -> Tuple[float, np.ndarray]:
    """L1 over the valid-depth mask; an empty mask yields 0."""
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise DataError("depth map / mask shape mismatch")
    m = mask.astype(bool)
    count = int(m.sum())
    grad = np.zeros_like(pred)
    if count == 0:
        import warnings

        warnings.warn("loss_depth: empty validity mask, loss defined as 0")
        return 0.0, grad
    diff = pred - gt
    val = float(np.sum(np.abs(diff[m])) / count)
    grad[m] = np.sign(diff[m]) / count
    return val, grad


def loss_sky(alpha: np.ndarray, sky_mask: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean rendered alpha over sky pixels (drives them transparent)."""
    if alpha.shape != sky_mask.shape:
        raise DataError("alpha map / sky mask shape mismatch")
    m = sky_mask.astype(bool)
    count = int(m.sum())
    grad = np.zeros_like(alpha)
    if count == 0:
        return 0.0, grad
    grad[m] = 1.0 / count
    return float(np.mean(alpha[m])), grad


def loss_reg(speeds: np.ndarray, dirs: np.ndarray
             ) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean over Gaussians of sum_l ||m_l||^2; returns gradients w.r.t. the
    raw speeds and directions."""
    m = motion_coefficient(speeds, dirs)  # (N, L, 3)
    n = max(m.shape[0], 1)
    val = float(np.sum(m ** 2) / n)
    # ||m_l||^2 = s_l^2 for non-degenerate directions: gradient is 2 s_l / N
    # and zero w.r.t. the direction (norm-invariant).
    norm = np.linalg.norm(dirs, axis=-1)
    d_speeds = np.where(norm < 1e-8, 0.0, 2.0 * speeds / n)
    d_dirs = np.zeros_like(dirs)
    return val, d_speeds, d_dirs


def loss_sem(pred_decoded: np.ndarray, teacher: np.ndarray
             ) -> Tuple[float, np.ndarray]:
    """MSE between decoded rendered features and teacher feature maps."""
    if pred_decoded.shape != teacher.shape:
        raise DataError(f"feature shape mismatch: {pred_decoded.shape} vs {teacher.shape}")
    diff = pred_decoded - teacher
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def loss_cls(pred_decoded: np.ndarray, text_bank: np.ndarray,
             labels: np.ndarray, tau: float = 0.07) -> Tuple[float, np.ndarray]:
    """Temperature-scaled softmax cross-entropy of per-pixel features against
    the class text embeddings."""
    if tau <= 0:
        raise DataError("temperature must be positive")
    H, W, c = pred_decoded.shape
    K = text_bank.shape[0]
    labels = np.asarray(labels)
    if labels.shape != (H, W):
        raise DataError(f"label map must be ({H}, {W}), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= K:
        raise DataError(f"labels must lie in [0, {K})")
    logits = pred_decoded @ text_bank.T / tau  # (H, W, K)
    logits -= logits.max(axis=-1, keepdims=True)
    expl = np.exp(logits)
    p = expl / expl.sum(axis=-1, keepdims=True)
    picked = np.take_along_axis(p, labels[..., None], axis=-1)[..., 0]
    val = float(np.mean(-np.log(np.maximum(picked, 1e-300))))
    onehot = np.zeros((H, W, K))
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    grad = (p - onehot) @ text_bank / (tau * H * W)
    return val, grad


def loss_total(components: Dict[str, float], weights: LossWeights) -> float:
    """L_rgb + L_depth + lam_sky L_sky + lam_reg L_reg + lam_feat L_feat,
    where L_feat is the feature loss selected by feat_mode. Missing optional
    supervision contributes 0."""
    feat_key = weights.feat_mode
    return (components.get("rgb", 0.0)
            + components.get("depth", 0.0)
            + weights.lam_sky * components.get("sky", 0.0)
            + weights.lam_reg * components.get("reg", 0.0)
            + weights.lam_feat * components.get(feat_key, 0.0))
