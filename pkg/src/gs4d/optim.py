"""Per-scene gradient fitting: rendering-supervised motion learning and the
two-stage semantic schedule, with an Adam-style adaptive update."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import DataError
from . import losses as L
from .motion import backprop_displacement, warp_gaussians
from .renderer import RenderOptions, render, render_backward
from .scene import FrameObservation, GaussianSet
from .semantics import FeatureDecoder, TextEmbeddingBank


class Adam:
    """Adaptive first-order update (decoupled weight decay disabled)."""

    def __init__(self, lrs: Dict[str, float], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lrs = lrs
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, g in grads.items():
            if name not in params:
                continue
            m = self.m.setdefault(name, np.zeros_like(params[name]))
            v = self.v.setdefault(name, np.zeros_like(params[name]))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            params[name] -= self.lrs[name] * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class FitConfig:
    iterations: int = 300
    lr_motion: float = 1e-2
    lr_appearance: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    stage_sem_iters: int = 0
    stage_cls_iters: int = 0
    seed: int = 0
    train_geometry: bool = False
    ref_time: Optional[int] = None
    eval_every: int = 25
    use_perceptual: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise DataError("iterations must be >= 1")


@dataclass
class FitReport:
    trace: List[dict]
    best_loss: float
    best_iteration: int
    iterations: int
    seed: int
    wall_clock: float
    diagnostic: Optional[str] = None

    def as_dict(self) -> dict:
        return {"best_loss": self.best_loss, "best_iteration": self.best_iteration,
                "iterations": self.iterations, "seed": self.seed,
                "wall_clock": self.wall_clock, "diagnostic": self.diagnostic,
                "trace": self.trace}


def _frame_losses(scene: GaussianSet, frame: FrameObservation, dt: float,
                  cfg: FitConfig, want_grads: bool):
    """Render the warped scene against one supervision frame and evaluate the
    photometric/geometric losses (no feature loss here)."""
    warped = warp_gaussians(scene, dt)
    opt = RenderOptions(threads=cfg.threads)
    out = render(warped, frame.camera, opt)
    comps: Dict[str, float] = {}
    perceptual = L.gradient_perceptual if cfg.use_perceptual else None
    comps["rgb"], d_rgb = L.loss_rgb(out.rgb, frame.image, perceptual,
                                     cfg.weights.lam_lpips)
    map_grads: Dict[str, np.ndarray] = {"rgb": d_rgb}
    if frame.depth_gt is not None:
        mask = frame.depth_valid if frame.depth_valid is not None \
            else np.ones_like(frame.depth_gt, dtype=bool)
        comps["depth"], d_depth = L.loss_depth(out.depth, frame.depth_gt, mask)
        map_grads["depth"] = d_depth
    if frame.sky_mask is not None:
        comps["sky"], d_alpha = L.loss_sky(out.alpha, frame.sky_mask)
        map_grads["alpha"] = cfg.weights.lam_sky * d_alpha
    comps["reg"], d_reg_speeds, d_reg_dirs = L.loss_reg(scene.speeds, scene.dirs)
    if not want_grads:
        return comps, None, None, None
    gr = render_backward(warped, frame.camera, out, map_grads, opt)
    return comps, gr, (d_reg_speeds, d_reg_dirs), out


def _total_over_frames(scene, frames, cfg):
    vals = []
    for frame in frames:
        dt = frame.timestamp - (cfg.ref_time if cfg.ref_time is not None
                                else frames[0].timestamp)
        comps, *_ = _frame_losses(scene, frame, dt, cfg, want_grads=False)
        vals.append(L.loss_total(comps, cfg.weights))
    return float(np.mean(vals))


def fit_motion(scene: GaussianSet, frames: List[FrameObservation],
               cfg: FitConfig):
    """Fit per-Gaussian motion (and optionally geometry) by gradient descent
    on renders of the time-warped scene. Returns (fitted scene, FitReport);
    the returned state is the one with the lowest recorded total loss."""
    ref = cfg.ref_time if cfg.ref_time is not None else frames[0].timestamp
    if not any(f.timestamp != ref for f in frames):
        raise DataError("fit_motion needs at least one supervision frame with dt != 0")
    rng = np.random.default_rng(cfg.seed)
    work = scene.copy()
    params = {"speeds": work.speeds, "dirs": work.dirs}
    lrs = {"speeds": cfg.lr_motion, "dirs": cfg.lr_motion}
    if cfg.train_geometry:
        for name, lr in (("mu", cfg.lr_appearance), ("s", cfg.lr_appearance),
                         ("alpha", cfg.lr_appearance), ("c", cfg.lr_appearance),
                         ("q", cfg.lr_appearance)):
            params[name] = getattr(work, name)
            lrs[name] = lr
    opt = Adam(lrs, cfg.beta1, cfg.beta2)

    trace: List[dict] = []
    best = {k: v.copy() for k, v in params.items()}
    best_loss = _total_over_frames(work, frames, cfg)
    best_iter = -1
    diagnostic = None
    start = time.perf_counter()
    for it in range(cfg.iterations):
        frame = frames[int(rng.integers(len(frames)))]
        dt = frame.timestamp - ref
        comps, gr, (d_reg_sp, d_reg_dir), _ = _frame_losses(
            work, frame, dt, cfg, want_grads=True)
        total = L.loss_total(comps, cfg.weights)
        if not np.isfinite(total):
            diagnostic = f"non-finite loss at iteration {it}; aborting with last finite state"
            best = {k: v.copy() for k, v in params.items()}
            best_iter = it - 1
            break
        g_speeds, g_dirs = backprop_displacement(work.speeds, work.dirs, dt, gr.d_mu)
        g_speeds += cfg.weights.lam_reg * d_reg_sp
        g_dirs += cfg.weights.lam_reg * d_reg_dir
        grads = {"speeds": g_speeds, "dirs": g_dirs}
        if cfg.train_geometry:
            grads.update({"mu": gr.d_mu, "s": gr.d_s, "alpha": gr.d_alpha,
                          "c": gr.d_c, "q": gr.d_q})
        opt.step(params, grads)
        if cfg.train_geometry:
            np.clip(work.alpha, 0.0, 1.0, out=work.alpha)
            np.clip(work.c, 0.0, 1.0, out=work.c)
            np.clip(work.s, 1e-6, 0.5, out=work.s)
        trace.append({"iteration": it, "dt": dt, "total": total, **comps})
        if (it + 1) % cfg.eval_every == 0 or it == cfg.iterations - 1:
            full = _total_over_frames(work, frames, cfg)
            if full < best_loss:
                best_loss = full
                best_iter = it
                best = {k: v.copy() for k, v in params.items()}
    wall = time.perf_counter() - start
    fitted = scene.copy()
    for k, v in best.items():
        setattr(fitted, k, v)
    report = FitReport(trace=trace, best_loss=best_loss, best_iteration=best_iter,
                       iterations=cfg.iterations, seed=cfg.seed, wall_clock=wall,
                       diagnostic=diagnostic)
    return fitted, report


def fit_semantics(scene: GaussianSet, frames: List[FrameObservation],
                  cfg: FitConfig, decoder: Optional[FeatureDecoder] = None,
                  bank: Optional[TextEmbeddingBank] = None,
                  train_decoder: bool = True):
    """Two-stage semantic fitting of per-Gaussian features and the decoder:
    stage 1 distills teacher feature maps (MSE), stage 2 swaps in the
    text-bank classification loss."""
    if scene.feature is None:
        raise DataError("fit_semantics requires a scene with feature channels")
    stage1, stage2 = cfg.stage_sem_iters, cfg.stage_cls_iters
    if stage1 + stage2 < 1:
        raise DataError("fit_semantics needs at least one stage iteration")
    if stage1 > 0 and not any(f.teacher_features is not None for f in frames):
        raise DataError("stage 1 requires teacher features on some frame")
    if stage2 > 0:
        if bank is None:
            raise DataError("stage 2 requires a text embedding bank")
        if not any(f.semantic_labels is not None for f in frames):
            raise DataError("stage 2 requires semantic labels on some frame")
    decoder = decoder or FeatureDecoder(np.random.default_rng(cfg.seed))
    ref = cfg.ref_time if cfg.ref_time is not None else frames[0].timestamp
    rng = np.random.default_rng(cfg.seed)
    work = scene.copy()
    params: Dict[str, np.ndarray] = {"feature": work.feature}
    lrs = {"feature": cfg.lr_appearance}
    if train_decoder:
        for name, arr in decoder.params.items():
            params[name] = arr
            lrs[name] = cfg.lr_appearance
    opt = Adam(lrs, cfg.beta1, cfg.beta2)
    ropt = RenderOptions(render_feature=True, threads=cfg.threads)

    trace: List[dict] = []
    diagnostic = None
    best_loss = np.inf
    best_iter = -1
    best = {k: v.copy() for k, v in params.items()}
    start = time.perf_counter()
    for it in range(stage1 + stage2):
        mode = "sem" if it < stage1 else "cls"
        pool = [f for f in frames if (f.teacher_features is not None if mode == "sem"
                                      else f.semantic_labels is not None)]
        frame = pool[int(rng.integers(len(pool)))]
        dt = frame.timestamp - ref
        warped = warp_gaussians(work, dt)
        out = render(warped, frame.camera, ropt)
        decoded, cache = decoder.forward(out.feature)
        if mode == "sem":
            val, d_decoded = L.loss_sem(decoded, frame.teacher_features)
        else:
            val, d_decoded = L.loss_cls(decoded, bank.embeddings,
                                        frame.semantic_labels, bank.tau)
        if not np.isfinite(val):
            diagnostic = f"non-finite loss at iteration {it}; aborting with last finite state"
            break
        weighted = cfg.weights.lam_feat * val
        d_fmap, d_dec = decoder.backward(cache, cfg.weights.lam_feat * d_decoded)
        gr = render_backward(warped, frame.camera, out, {"feature": d_fmap}, ropt)
        grads: Dict[str, np.ndarray] = {"feature": gr.d_feature}
        if train_decoder:
            grads.update(d_dec)
        opt.step(params, grads)
        decoder.set_params({k: params.get(k, v) for k, v in decoder.params.items()})
        trace.append({"iteration": it, "mode": mode, "dt": dt, "loss": val})
        if weighted < best_loss:
            best_loss = weighted
            best_iter = it
            best = {k: v.copy() for k, v in params.items()}
    wall = time.perf_counter() - start
    fitted = scene.copy()
    fitted.feature = best["feature"]
    decoder.set_params({k: best.get(k, v) for k, v in decoder.params.items()})
    report = FitReport(trace=trace, best_loss=float(best_loss), best_iteration=best_iter,
                       iterations=stage1 + stage2, seed=cfg.seed, wall_clock=wall,
                       diagnostic=diagnostic)
    return fitted, decoder, report
