"""Differentiable tile-based Gaussian splatting.

Forward: EWA-style projection of each Gaussian to a 2D mean/covariance,
depth-sorted front-to-back alpha compositing per tile, producing RGB, depth
(alpha-weighted expected depth), alpha and optional feature maps.

Backward: exact analytic gradients of the compositing expression w.r.t.
mu, q, s, alpha, c and feature, replayed from per-tile blend records.
Per-tile partials are reduced in fixed tile order, so results do not depend
on the worker count.
"""
from __future__ import annotations

import secrets
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import DataError
from .scene import CameraModel, GaussianPrimitive, GaussianSet, quat_to_rot

TRUNCATION_SIGMA = 3.0
DILATION = 0.3  # pixel^2 covariance floor for stable small-Gaussian gradients


@dataclass
class RenderOptions:
    render_feature: bool = False
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tile_size: int = 16
    threads: int = 1


@dataclass
class RenderGradients:
    d_mu: np.ndarray
    d_q: np.ndarray
    d_s: np.ndarray
    d_alpha: np.ndarray
    d_c: np.ndarray
    d_feature: Optional[np.ndarray] = None


class _Projection:
    """Per-Gaussian projection cache shared by forward and backward."""

    __slots__ = ("valid", "p_cam", "mean2d", "cov2d", "lam", "M", "J", "radius",
                 "qhat", "qnorm", "Rq", "A", "order")

    def __init__(self):
        self.order = None


def _project_set(g: GaussianSet, camera: CameraModel) -> _Projection:
    if abs(camera.K[0, 1]) > 0:
        raise DataError("renderer requires zero-skew intrinsics")
    pr = _Projection()
    fx, fy = camera.K[0, 0], camera.K[1, 1]
    cx, cy = camera.K[0, 2], camera.K[1, 2]
    p_cam = g.mu @ camera.R.T + camera.t
    z = p_cam[:, 2]
    valid = z > camera.near
    pr.valid = valid
    pr.p_cam = p_cam
    x, y = p_cam[:, 0], p_cam[:, 1]
    zs = np.where(valid, z, 1.0)  # placeholder for culled rows
    mean2d = np.stack([fx * x / zs + cx, fy * y / zs + cy], axis=-1)
    pr.mean2d = mean2d

    J = np.zeros((len(g), 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * x / zs ** 2
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * y / zs ** 2
    pr.J = J

    qnorm = np.linalg.norm(g.q, axis=-1, keepdims=True)
    qhat = g.q / np.where(qnorm < 1e-12, 1.0, qnorm)
    pr.qnorm, pr.qhat = qnorm, qhat
    Rq = quat_to_rot(qhat)
    pr.Rq = Rq
    A = Rq * g.s[:, None, :]
    pr.A = A
    sigma = A @ np.transpose(A, (0, 2, 1))
    M = np.einsum("nij,jk->nik", J, camera.R)
    pr.M = M
    cov = np.einsum("nij,njk,nlk->nil", M, sigma, M)
    cov[:, 0, 0] += DILATION
    cov[:, 1, 1] += DILATION
    pr.cov2d = cov

    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    det = np.where(det <= 0, 1.0, det)
    lam = np.empty_like(cov)
    lam[:, 0, 0] = cov[:, 1, 1] / det
    lam[:, 1, 1] = cov[:, 0, 0] / det
    lam[:, 0, 1] = -cov[:, 0, 1] / det
    lam[:, 1, 0] = -cov[:, 1, 0] / det
    pr.lam = lam

    # screen-space footprint from the dominant eigenvalue
    mid = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
    disc = np.sqrt(np.maximum(mid ** 2 - det, 0.0))
    pr.radius = TRUNCATION_SIGMA * np.sqrt(np.maximum(mid + disc, 1e-12))

    order = np.flatnonzero(valid)
    order = order[np.lexsort((order, p_cam[order, 2]))]
    pr.order = order
    return pr


def project_gaussian(g: GaussianPrimitive, camera: CameraModel
                     ) -> Optional[Tuple[np.ndarray, np.ndarray, float]]:
    """Screen mean, dilated 2x2 screen covariance, camera depth of one
    Gaussian; None if culled behind the camera."""
    gs = GaussianSet.from_primitives([g])
    pr = _project_set(gs, camera)
    if not pr.valid[0]:
        return None
    return pr.mean2d[0], pr.cov2d[0], float(pr.p_cam[0, 2])


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    feature: Optional[np.ndarray]
    blend_records: "BlendRecords"


@dataclass
class BlendRecords:
    """Per-tile ordered contributor lists retained for the backward pass."""

    tiles: List[tuple]          # (y0, y1, x0, x1, [(gidx, G, T_before), ...])
    projection: _Projection
    weighted_depth: np.ndarray  # sum_i w_i * z_i, pre-normalization
    token: str
    n_gaussians: int
    mu_checksum: float


def _tile_bins(pr: _Projection, width: int, height: int, tile: int
               ) -> Dict[Tuple[int, int], List[int]]:
    bins: Dict[Tuple[int, int], List[int]] = {}
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    for gi in pr.order:
        u, v = pr.mean2d[gi]
        r = pr.radius[gi]
        tx0 = max(int((u - r) // tile), 0)
        tx1 = min(int((u + r) // tile), ntx - 1)
        ty0 = max(int((v - r) // tile), 0)
        ty1 = min(int((v + r) // tile), nty - 1)
        if tx1 < 0 or ty1 < 0 or tx0 >= ntx or ty0 >= nty or tx0 > tx1 or ty0 > ty1:
            continue
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                bins.setdefault((ty, tx), []).append(int(gi))
    return bins


def _falloff(pr: _Projection, gi: int, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    dx = X - pr.mean2d[gi, 0]
    dy = Y - pr.mean2d[gi, 1]
    lam = pr.lam[gi]
    power = -0.5 * (lam[0, 0] * dx * dx + 2 * lam[0, 1] * dx * dy + lam[1, 1] * dy * dy)
    G = np.exp(power)
    G[power < -0.5 * TRUNCATION_SIGMA ** 2] = 0.0
    return G


def render(g: GaussianSet, camera: CameraModel,
           options: Optional[RenderOptions] = None) -> RenderOutput:
    """Front-to-back alpha compositing in camera-depth order.

    rgb = sum_i w_i c_i + (1 - A) * background, depth = sum_i w_i z_i / A
    (0 where A = 0), feature = sum_i w_i f_i, with
    w_i = alpha_i G_i(px) prod_{j<i} (1 - alpha_j G_j(px)).
    """
    opt = options or RenderOptions()
    H, W = camera.height, camera.width
    nfeat = 0
    if opt.render_feature:
        if g.feature is None:
            raise DataError("feature rendering requested but the scene has no features")
        nfeat = g.feature.shape[1]

    rgb = np.zeros((H, W, 3))
    sdepth = np.zeros((H, W))
    acc = np.zeros((H, W))
    feat = np.zeros((H, W, nfeat)) if opt.render_feature else None

    pr = _project_set(g, camera) if len(g) else _Projection()
    tiles: List[tuple] = []
    if len(g) and len(pr.order):
        bins = _tile_bins(pr, W, H, opt.tile_size)

        def run_tile(item):
            (ty, tx), glist = item
            y0, x0 = ty * opt.tile_size, tx * opt.tile_size
            y1, x1 = min(y0 + opt.tile_size, H), min(x0 + opt.tile_size, W)
            X, Y = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
            T = np.ones((y1 - y0, x1 - x0))
            t_rgb = np.zeros((y1 - y0, x1 - x0, 3))
            t_sd = np.zeros_like(T)
            t_acc = np.zeros_like(T)
            t_feat = np.zeros((y1 - y0, x1 - x0, nfeat)) if opt.render_feature else None
            records = []
            for gi in glist:
                G = _falloff(pr, gi, X, Y)
                a = g.alpha[gi] * G
                if not a.any():
                    continue
                w = a * T
                t_rgb += w[:, :, None] * g.c[gi]
                t_sd += w * pr.p_cam[gi, 2]
                t_acc += w
                if t_feat is not None:
                    t_feat += w[:, :, None] * g.feature[gi]
                records.append((gi, G, T.copy()))
                T = T * (1.0 - a)
            return (y0, y1, x0, x1, records, t_rgb, t_sd, t_acc, t_feat)

        items = sorted(bins.items())
        if opt.threads > 1:
            with ThreadPoolExecutor(max_workers=opt.threads) as pool:
                results = list(pool.map(run_tile, items))
        else:
            results = [run_tile(it) for it in items]
        for y0, y1, x0, x1, records, t_rgb, t_sd, t_acc, t_feat in results:
            rgb[y0:y1, x0:x1] = t_rgb
            sdepth[y0:y1, x0:x1] = t_sd
            acc[y0:y1, x0:x1] = t_acc
            if feat is not None:
                feat[y0:y1, x0:x1] = t_feat
            tiles.append((y0, y1, x0, x1, records))

    bg = np.asarray(opt.background, dtype=np.float64)
    rgb = rgb + (1.0 - acc)[:, :, None] * bg
    depth = np.where(acc > 0, sdepth / np.where(acc > 0, acc, 1.0), 0.0)
    records = BlendRecords(
        tiles=tiles, projection=pr, weighted_depth=sdepth, token=secrets.token_hex(8),
        n_gaussians=len(g), mu_checksum=float(g.mu.sum()) if len(g) else 0.0,
    )
    return RenderOutput(rgb=rgb, depth=depth, alpha=acc, feature=feat,
                        blend_records=records)


# quaternion-to-rotation Jacobian, d R(qhat) / d qhat, shape (N, 4, 3, 3)
def _rot_jacobian(qhat: np.ndarray) -> np.ndarray:
    w, x, y, z = qhat[:, 0], qhat[:, 1], qhat[:, 2], qhat[:, 3]
    o = np.zeros_like(w)
    dW = np.stack([o, -z, y, z, o, -x, -y, x, o], axis=-1)
    dX = np.stack([o, y, z, y, -2 * x, -w, z, w, -2 * x], axis=-1)
    dY = np.stack([-2 * y, x, w, x, o, z, -w, z, -2 * y], axis=-1)
    dZ = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, o], axis=-1)
    J = 2.0 * np.stack([dW, dX, dY, dZ], axis=1)
    return J.reshape(qhat.shape[0], 4, 3, 3)


def render_backward(g: GaussianSet, camera: CameraModel, out: RenderOutput,
                    grads: Dict[str, np.ndarray],
                    options: Optional[RenderOptions] = None) -> RenderGradients:
    """Backpropagate loss gradients on the output maps to the Gaussians.

    ``grads`` may contain 'rgb' (H,W,3), 'depth' (H,W), 'alpha' (H,W) and
    'feature' (H,W,F); missing entries are treated as zero.
    """
    opt = options or RenderOptions()
    rec = out.blend_records
    if rec.n_gaussians != len(g) or (len(g) and abs(rec.mu_checksum - float(g.mu.sum())) > 0):
        raise DataError("blend records do not match this Gaussian set")
    n = len(g)
    H, W = camera.height, camera.width
    nfeat = g.feature.shape[1] if g.feature is not None else 0

    d_rgb = grads.get("rgb")
    d_depth = grads.get("depth")
    d_alpha_map = grads.get("alpha")
    d_feat_map = grads.get("feature")

    acc = out.alpha
    pos = acc > 0
    safe_acc = np.where(pos, acc, 1.0)
    dL_dSd = np.zeros((H, W))
    dL_dA = np.zeros((H, W))
    if d_depth is not None:
        dL_dSd += np.where(pos, d_depth / safe_acc, 0.0)
        dL_dA += np.where(pos, -d_depth * rec.weighted_depth / safe_acc ** 2, 0.0)
    if d_alpha_map is not None:
        dL_dA += d_alpha_map
    bg = np.asarray(opt.background, dtype=np.float64)
    if d_rgb is not None and bg.any():
        dL_dA -= d_rgb @ bg

    gr = RenderGradients(
        d_mu=np.zeros((n, 3)), d_q=np.zeros((n, 4)), d_s=np.zeros((n, 3)),
        d_alpha=np.zeros(n), d_c=np.zeros((n, 3)),
        d_feature=np.zeros((n, nfeat)) if nfeat else None,
    )
    if n == 0:
        return gr
    pr = rec.projection
    d_u = np.zeros((n, 2))
    d_lam = np.zeros((n, 2, 2))
    d_z_payload = np.zeros(n)

    def run_tile(tile):
        y0, y1, x0, x1, records = tile
        X, Y = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
        t_rgb = d_rgb[y0:y1, x0:x1] if d_rgb is not None else None
        t_sd = dL_dSd[y0:y1, x0:x1]
        t_da = dL_dA[y0:y1, x0:x1]
        t_feat = d_feat_map[y0:y1, x0:x1] if d_feat_map is not None else None
        suffix = np.zeros((y1 - y0, x1 - x0))
        part: Dict[int, list] = {}
        for gi, G, Tb in reversed(records):
            a = g.alpha[gi] * G
            w = a * Tb
            g_px = t_sd * pr.p_cam[gi, 2] + t_da
            if t_rgb is not None:
                g_px = g_px + t_rgb @ g.c[gi]
            if t_feat is not None:
                g_px = g_px + t_feat @ g.feature[gi]
            one_minus = 1.0 - a
            dL_da = Tb * g_px - np.where(one_minus > 1e-12, suffix / np.where(
                one_minus > 1e-12, one_minus, 1.0), 0.0)
            suffix = suffix + w * g_px
            p = part.setdefault(gi, [0.0, np.zeros(3), np.zeros(nfeat) if nfeat else None,
                                     0.0, np.zeros(2), np.zeros((2, 2))])
            p[0] += float(np.sum(G * dL_da))
            if t_rgb is not None:
                p[1] += np.einsum("yx,yxc->c", w, t_rgb)
            if t_feat is not None:
                p[2] += np.einsum("yx,yxc->c", w, t_feat)
            p[3] += float(np.sum(w * t_sd))
            dpower = g.alpha[gi] * dL_da * G
            dx = X - pr.mean2d[gi, 0]
            dy = Y - pr.mean2d[gi, 1]
            lam = pr.lam[gi]
            p[4][0] += float(np.sum(dpower * (lam[0, 0] * dx + lam[0, 1] * dy)))
            p[4][1] += float(np.sum(dpower * (lam[0, 1] * dx + lam[1, 1] * dy)))
            p[5][0, 0] += float(np.sum(dpower * (-0.5 * dx * dx)))
            p[5][0, 1] += float(np.sum(dpower * (-0.5 * dx * dy)))
            p[5][1, 0] += float(np.sum(dpower * (-0.5 * dy * dx)))
            p[5][1, 1] += float(np.sum(dpower * (-0.5 * dy * dy)))
        return part

    if opt.threads > 1:
        with ThreadPoolExecutor(max_workers=opt.threads) as pool:
            parts = list(pool.map(run_tile, rec.tiles))
    else:
        parts = [run_tile(t) for t in rec.tiles]
    for part in parts:  # fixed tile order: deterministic reduction
        for gi, p in part.items():
            gr.d_alpha[gi] += p[0]
            gr.d_c[gi] += p[1]
            if nfeat:
                gr.d_feature[gi] += p[2]
            d_z_payload[gi] += p[3]
            d_u[gi] += p[4]
            d_lam[gi] += p[5]

    # chain screen-space gradients through projection, for valid Gaussians
    idx = pr.order
    if len(idx) == 0:
        return gr
    lam = pr.lam[idx]
    d_cov = -np.einsum("nij,njk,nkl->nil", lam, d_lam[idx], lam)
    M = pr.M[idx]
    A = pr.A[idx]
    sigma = A @ np.transpose(A, (0, 2, 1))
    d_sigma = np.einsum("nji,njk,nkl->nil", M, d_cov, M)
    d_M = 2.0 * np.einsum("nij,njk,nkl->nil", d_cov, M, sigma)
    d_J = np.einsum("nij,kj->nik", d_M, camera.R)

    fx, fy = camera.K[0, 0], camera.K[1, 1]
    p_cam = pr.p_cam[idx]
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    d_pcam = np.einsum("nij,ni->nj", pr.J[idx], d_u[idx])
    d_pcam[:, 0] += d_J[:, 0, 2] * (-fx / z ** 2)
    d_pcam[:, 1] += d_J[:, 1, 2] * (-fy / z ** 2)
    d_pcam[:, 2] += (d_J[:, 0, 0] * (-fx / z ** 2) + d_J[:, 0, 2] * (2 * fx * x / z ** 3)
                     + d_J[:, 1, 1] * (-fy / z ** 2) + d_J[:, 1, 2] * (2 * fy * y / z ** 3))
    d_pcam[:, 2] += d_z_payload[idx]
    gr.d_mu[idx] = d_pcam @ camera.R

    d_A = 2.0 * np.einsum("nij,njk->nik", d_sigma, A)
    gr.d_s[idx] = np.einsum("nik,nik->nk", pr.Rq[idx], d_A)
    d_Rq = d_A * g.s[idx][:, None, :]
    dRdq = _rot_jacobian(pr.qhat[idx])
    d_qhat = np.einsum("nij,naij->na", d_Rq, dRdq)
    qhat = pr.qhat[idx]
    qn = pr.qnorm[idx]
    gr.d_q[idx] = (d_qhat - np.sum(d_qhat * qhat, axis=-1, keepdims=True) * qhat) / qn
    return gr
