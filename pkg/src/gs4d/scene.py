"""Gaussian/camera data model, raw-parameter activations and ray geometry.

All reference-path math is float64. Types are immutable value objects after
construction and safe to share read-only across threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError

NEAR_DEFAULT = 0.2
FAR_DEFAULT = 400.0
SCALE_OFFSET = -0.693  # log(0.5): biases toward large initial Gaussians
SCALE_MAX = 0.5
OPACITY_OFFSET = 2.0
FEATURE_DIM = 64
MOTION_ORDERS = 3
QUAT_EPS = 1e-8


def _as_f64(x, shape, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != shape:
        raise DataError(f"{name}: expected shape {shape}, got {arr.shape}")
    return arr


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < QUAT_EPS):
        raise DataError("degenerate quaternion: norm below 1e-8")
    return q / n


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) -> 3x3 rotation. Supports batching."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass(frozen=True)
class Ray:
    """A viewing ray with unit direction."""

    o: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "o", _as_f64(self.o, (3,), "ray origin"))
        object.__setattr__(self, "r", _as_f64(self.r, (3,), "ray direction"))
        if abs(np.linalg.norm(self.r) - 1.0) > 1e-9:
            raise DataError("ray direction must be unit-norm within 1e-9")


def plucker_encode(ray: Ray) -> np.ndarray:
    """6D line encoding (direction, origin x direction); invariant to sliding
    the origin along the ray."""
    return np.concatenate([ray.r, np.cross(ray.o, ray.r)])


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics K, rigid world-to-camera transform (R, t)."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    near: float = NEAR_DEFAULT
    far: float = FAR_DEFAULT

    def __post_init__(self):
        object.__setattr__(self, "K", _as_f64(self.K, (3, 3), "K"))
        object.__setattr__(self, "R", _as_f64(self.R, (3, 3), "R"))
        object.__setattr__(self, "t", _as_f64(self.t, (3,), "t"))
        K = self.K
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or abs(K[2, 2] - 1) > 1e-12:
            raise DataError("K must be upper-triangular with K[2,2] = 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise DataError("K focal entries must be positive")
        if np.max(np.abs(self.R @ self.R.T - np.eye(3))) > 1e-6:
            raise DataError("extrinsic rotation must be orthonormal within 1e-6")
        if not (0 < self.near < self.far):
            raise DataError("camera requires 0 < near < far")
        if self.width <= 0 or self.height <= 0:
            raise DataError("image size must be positive")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def world_to_cam(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.R.T + self.t

    def project(self, pts: np.ndarray) -> np.ndarray:
        """Project world points to pixel coordinates (no bounds check)."""
        cam = self.world_to_cam(np.atleast_2d(pts))
        z = cam[:, 2]
        u = self.K[0, 0] * cam[:, 0] / z + self.K[0, 1] * cam[:, 1] / z + self.K[0, 2]
        v = self.K[1, 1] * cam[:, 1] / z + self.K[1, 2]
        return np.stack([u, v], axis=-1)


def pixel_ray(camera: CameraModel, px: Sequence[float]) -> Ray:
    """World-space ray through the center of pixel ``px`` = (col, row)."""
    px = np.asarray(px, dtype=np.float64)
    if px.shape != (2,):
        raise DataError(f"pixel must be a 2-vector, got shape {px.shape}")
    if not (0 <= px[0] < camera.width and 0 <= px[1] < camera.height):
        raise DataError(f"pixel {px} outside {camera.width}x{camera.height} image")
    uv1 = np.array([px[0] + 0.5, px[1] + 0.5, 1.0])
    d_cam = np.linalg.solve(camera.K, uv1)
    d_world = camera.R.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(o=camera.center, r=d_world)


@dataclass(frozen=True)
class RawGaussianParams:
    """Raw (pre-activation) decoder outputs for one pixel-aligned Gaussian."""

    depth_raw: float
    rot_raw: np.ndarray       # (4,)
    scale_raw: np.ndarray     # (3,)
    opacity_raw: float
    color_raw: np.ndarray     # (3,)
    motion_raw: np.ndarray    # (12,): 3 orders x (speed + 3-d direction)
    feature: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_DIM))

    def __post_init__(self):
        object.__setattr__(self, "rot_raw", _as_f64(self.rot_raw, (4,), "rot_raw"))
        object.__setattr__(self, "scale_raw", _as_f64(self.scale_raw, (3,), "scale_raw"))
        object.__setattr__(self, "color_raw", _as_f64(self.color_raw, (3,), "color_raw"))
        object.__setattr__(self, "motion_raw", _as_f64(self.motion_raw, (12,), "motion_raw"))
        object.__setattr__(self, "feature", _as_f64(self.feature, (FEATURE_DIM,), "feature"))
        for name in ("depth_raw", "opacity_raw"):
            if not np.isfinite(getattr(self, name)):
                raise DataError(f"non-finite raw input in field '{name}'")
        for name in ("rot_raw", "scale_raw", "color_raw", "motion_raw", "feature"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"non-finite raw input in field '{name}'")


def _default_dirs(orders: int) -> np.ndarray:
    d = np.zeros((orders, 3))
    d[:, 0] = 1.0
    return d


@dataclass(frozen=True)
class MotionCoefficients:
    """Per-order (speed, direction) pairs; ``m`` caches the normalized
    speed-scaled coefficients."""

    speeds: np.ndarray  # (L,)
    dirs: np.ndarray    # (L, 3)

    def __post_init__(self):
        speeds = np.asarray(self.speeds, dtype=np.float64)
        dirs = np.asarray(self.dirs, dtype=np.float64)
        if speeds.ndim != 1 or speeds.shape[0] < 1:
            raise DataError("motion requires at least one order")
        if dirs.shape != (speeds.shape[0], 3):
            raise DataError(f"direction array must be ({speeds.shape[0]}, 3), got {dirs.shape}")
        object.__setattr__(self, "speeds", speeds)
        object.__setattr__(self, "dirs", dirs)

    @property
    def orders(self) -> int:
        return self.speeds.shape[0]

    @property
    def m(self) -> np.ndarray:
        from .motion import motion_coefficient

        return motion_coefficient(self.speeds, self.dirs)


@dataclass(frozen=True)
class GaussianPrimitive:
    """One activated Gaussian: the atom of the 4D scene."""

    mu: np.ndarray
    q: np.ndarray
    s: np.ndarray
    alpha: float
    c: np.ndarray
    feature: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_DIM))
    motion: MotionCoefficients = field(
        default_factory=lambda: MotionCoefficients(
            speeds=np.zeros(MOTION_ORDERS), dirs=_default_dirs(MOTION_ORDERS)))

    def __post_init__(self):
        object.__setattr__(self, "mu", _as_f64(self.mu, (3,), "mu"))
        object.__setattr__(self, "q", _as_f64(self.q, (4,), "q"))
        object.__setattr__(self, "s", _as_f64(self.s, (3,), "s"))
        object.__setattr__(self, "c", _as_f64(self.c, (3,), "c"))
        object.__setattr__(self, "feature", np.asarray(self.feature, dtype=np.float64))
        if abs(np.linalg.norm(self.q) - 1.0) > 1e-6:
            raise DataError("quaternion must be unit within 1e-6")
        if np.any(self.s <= 0) or np.any(self.s > SCALE_MAX):
            raise DataError(f"scale components must lie in (0, {SCALE_MAX}]")
        if not (0 <= self.alpha <= 1):
            raise DataError("opacity must lie in [0, 1]")
        if np.any(self.c < 0) or np.any(self.c > 1):
            raise DataError("color must lie in [0, 1]")


def activate(raw: RawGaussianParams, ray: Ray, camera: CameraModel) -> GaussianPrimitive:
    """Map raw decoder outputs to a valid Gaussian on the given pixel ray.

    scale  = min(exp(x - 0.693), 0.5)
    alpha  = sigmoid(x - 2)
    color  = sigmoid(x)
    depth  = near + sigmoid(x) * (far - near)
    mu     = o + depth * r
    The raw quaternion carries no activation; it is unit-normalized here.
    """
    d = camera.near + sigmoid(raw.depth_raw) * (camera.far - camera.near)
    mu = ray.o + d * ray.r
    s = np.minimum(np.exp(raw.scale_raw + SCALE_OFFSET), SCALE_MAX)
    alpha = float(sigmoid(raw.opacity_raw - OPACITY_OFFSET))
    c = sigmoid(raw.color_raw)
    q = quat_normalize(raw.rot_raw)
    m_raw = raw.motion_raw.reshape(MOTION_ORDERS, 4)
    motion = MotionCoefficients(speeds=m_raw[:, 0], dirs=m_raw[:, 1:])
    return GaussianPrimitive(mu=mu, q=q, s=s, alpha=alpha, c=c, feature=raw.feature, motion=motion)


class GaussianSet:
    """Structure-of-arrays container for N Gaussians with motion and features.

    Arrays are float64 and treated as immutable; mutation helpers return new
    sets. ``feature`` may be None when the scene carries no semantic field.
    """

    __slots__ = ("mu", "q", "s", "alpha", "c", "feature", "speeds", "dirs")

    def __init__(self, mu, q, s, alpha, c, feature=None, speeds=None, dirs=None,
                 orders: int = MOTION_ORDERS):
        self.mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        n = self.mu.shape[0]
        self.q = np.asarray(q, dtype=np.float64).reshape(n, 4)
        self.s = np.asarray(s, dtype=np.float64).reshape(n, 3)
        self.alpha = np.asarray(alpha, dtype=np.float64).reshape(n)
        self.c = np.asarray(c, dtype=np.float64).reshape(n, 3)
        if feature is None:
            self.feature = None
        else:
            feature = np.asarray(feature, dtype=np.float64)
            # reshape(n, -1) is ill-posed for n == 0; trust the last axis then
            self.feature = feature.reshape(n, feature.shape[-1] if n == 0 else -1)
        if speeds is None:
            speeds = np.zeros((n, orders))
        if dirs is None:
            d = np.zeros((n, orders, 3))
            d[..., 0] = 1.0
            dirs = d
        speeds = np.asarray(speeds, dtype=np.float64)
        self.speeds = speeds.reshape(n, speeds.shape[-1] if n == 0 else -1)
        self.dirs = np.asarray(dirs, dtype=np.float64).reshape(n, self.speeds.shape[1], 3)

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def orders(self) -> int:
        return self.speeds.shape[1]

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.mu.copy(), self.q.copy(), self.s.copy(), self.alpha.copy(), self.c.copy(),
            None if self.feature is None else self.feature.copy(),
            self.speeds.copy(), self.dirs.copy(),
        )

    def select(self, idx) -> "GaussianSet":
        return GaussianSet(
            self.mu[idx], self.q[idx], self.s[idx], self.alpha[idx], self.c[idx],
            None if self.feature is None else self.feature[idx],
            self.speeds[idx], self.dirs[idx],
        )

    def replace(self, **kwargs) -> "GaussianSet":
        vals = {name: getattr(self, name) for name in self.__slots__}
        vals.update(kwargs)
        return GaussianSet(**vals)

    @staticmethod
    def concat(sets: Sequence["GaussianSet"]) -> "GaussianSet":
        sets = [s for s in sets if len(s) > 0]
        if not sets:
            return GaussianSet.empty()
        has_feat = all(s.feature is not None for s in sets)
        return GaussianSet(
            np.concatenate([s.mu for s in sets]),
            np.concatenate([s.q for s in sets]),
            np.concatenate([s.s for s in sets]),
            np.concatenate([s.alpha for s in sets]),
            np.concatenate([s.c for s in sets]),
            np.concatenate([s.feature for s in sets]) if has_feat else None,
            np.concatenate([s.speeds for s in sets]),
            np.concatenate([s.dirs for s in sets]),
        )

    @staticmethod
    def empty(orders: int = MOTION_ORDERS, feature_dim: Optional[int] = None) -> "GaussianSet":
        feat = None if feature_dim is None else np.zeros((0, feature_dim))
        return GaussianSet(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
            np.zeros((0, 3)), feat, np.zeros((0, orders)), np.zeros((0, orders, 3)),
        )

    @staticmethod
    def from_primitives(prims: Sequence[GaussianPrimitive]) -> "GaussianSet":
        if not prims:
            return GaussianSet.empty(feature_dim=FEATURE_DIM)
        return GaussianSet(
            np.stack([p.mu for p in prims]),
            np.stack([p.q for p in prims]),
            np.stack([p.s for p in prims]),
            np.array([p.alpha for p in prims]),
            np.stack([p.c for p in prims]),
            np.stack([p.feature for p in prims]),
            np.stack([p.motion.speeds for p in prims]),
            np.stack([p.motion.dirs for p in prims]),
        )

    def primitive(self, i: int) -> GaussianPrimitive:
        feat = np.zeros(FEATURE_DIM) if self.feature is None else self.feature[i]
        return GaussianPrimitive(
            mu=self.mu[i], q=self.q[i], s=self.s[i], alpha=float(self.alpha[i]),
            c=self.c[i], feature=feat,
            motion=MotionCoefficients(speeds=self.speeds[i], dirs=self.dirs[i]),
        )


@dataclass
class FrameObservation:
    """One observed frame: image, timestamp, camera and optional supervision."""

    image: np.ndarray           # (H, W, 3) in [0, 1]
    timestamp: int
    camera: CameraModel
    depth_gt: Optional[np.ndarray] = None       # (H, W) meters
    depth_valid: Optional[np.ndarray] = None    # (H, W) bool
    sky_mask: Optional[np.ndarray] = None       # (H, W) bool
    teacher_features: Optional[np.ndarray] = None  # (H, W, 512)
    semantic_labels: Optional[np.ndarray] = None   # (H, W) int

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"frame image must be (H, W, 3), got {self.image.shape}")
        hw = self.image.shape[:2]
        for name in ("depth_gt", "depth_valid", "sky_mask", "semantic_labels"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[:2] != hw:
                raise DataError(f"{name} shape {arr.shape} does not match image {hw}")
        if self.depth_valid is not None:
            self.depth_valid = np.asarray(self.depth_valid, dtype=bool)
        if self.sky_mask is not None:
            self.sky_mask = np.asarray(self.sky_mask, dtype=bool)
