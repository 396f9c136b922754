"""Higher-order Taylor motion model.

Displacement over a time offset dt (in frames) aggregates L orders:

    Gamma(dt) = sum_l m_l * dt^(l+1) / (l+1)!      l = 0..L-1

with m_l = s_l * v_l / ||v_l||. Order 0/1/2 are velocity, acceleration and
jerk. Negative dt is first-class (online backward warping).
"""
from __future__ import annotations

from math import factorial
from typing import Tuple

import numpy as np

from .errors import DataError, NumericalError
from .scene import GaussianSet

EPS_DIR = 1e-8
TAU_M_DEFAULT = 0.05  # meters per stride; no canonical value exists


def motion_coefficient(speed: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """m = speed * direction / ||direction||; zero when the direction is
    degenerate (||v|| < 1e-8). Broadcasts over leading axes."""
    speed = np.asarray(speed, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if not (np.all(np.isfinite(speed)) and np.all(np.isfinite(direction))):
        raise NumericalError("non-finite motion speed/direction")
    norm = np.linalg.norm(direction, axis=-1, keepdims=True)
    safe = np.where(norm < EPS_DIR, 1.0, norm)
    m = speed[..., None] * direction / safe
    return np.where(norm < EPS_DIR, 0.0, m)


def _taylor_weights(orders: int, dt: float) -> np.ndarray:
    """dt^(l+1) / (l+1)! for l = 0..orders-1."""
    return np.array([dt ** (l + 1) / factorial(l + 1) for l in range(orders)])


def displacement(m: np.ndarray, dt: float) -> np.ndarray:
    """Gamma(dt) from coefficients m of shape (..., L, 3) -> (..., 3)."""
    m = np.asarray(m, dtype=np.float64)
    w = _taylor_weights(m.shape[-2], dt)
    return np.einsum("...lk,l->...k", m, w)


def displacement_from_set(g: GaussianSet, dt: float) -> np.ndarray:
    return displacement(motion_coefficient(g.speeds, g.dirs), dt)


def warp_gaussians(g: GaussianSet, dt: float) -> GaussianSet:
    """Shift positions by Gamma(dt); every other attribute is preserved
    bitwise (only positions evolve over time)."""
    out = g.copy()
    out.mu = g.mu + displacement_from_set(g, dt)
    return out


def displacement_jacobian(speeds: np.ndarray, dirs: np.ndarray, dt: float
                          ) -> Tuple[np.ndarray, np.ndarray]:
    """Partials of Gamma(dt) w.r.t. each order's speed and direction.

    Returns (d_speed, d_dir) with shapes (..., L, 3) and (..., L, 3, 3):
        dGamma/ds_l = (v_l / ||v_l||) * dt^(l+1)/(l+1)!
        dGamma/dv_l = s_l (I/||v|| - v v^T/||v||^3) * dt^(l+1)/(l+1)!
    Degenerate directions get a zero Jacobian, consistent with the clamp.
    """
    speeds = np.asarray(speeds, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    L = speeds.shape[-1]
    w = _taylor_weights(L, dt)
    norm = np.linalg.norm(dirs, axis=-1, keepdims=True)
    degen = norm < EPS_DIR
    safe = np.where(degen, 1.0, norm)
    unit = np.where(degen, 0.0, dirs / safe)
    d_speed = unit * w[:, None]
    eye = np.eye(3)
    proj = (eye / safe[..., None]
            - dirs[..., :, None] * dirs[..., None, :] / safe[..., None] ** 3)
    d_dir = speeds[..., None, None] * proj * w[:, None, None]
    d_dir = np.where(degen[..., None], 0.0, d_dir)
    return d_speed, d_dir


def backprop_displacement(speeds: np.ndarray, dirs: np.ndarray, dt: float,
                          d_gamma: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Chain a gradient w.r.t. Gamma(dt) back to per-order speeds and
    directions. d_gamma has shape (..., 3)."""
    d_speed, d_dir = displacement_jacobian(speeds, dirs, dt)
    g_speeds = np.einsum("...lk,...k->...l", d_speed, d_gamma)
    g_dirs = np.einsum("...lkj,...k->...lj", d_dir, d_gamma)
    return g_speeds, g_dirs


def split_static_dynamic(g: GaussianSet, dt: float, tau_m: float
                         ) -> Tuple[GaussianSet, GaussianSet]:
    """Partition by motion magnitude: ||Gamma(dt)|| <= tau_m goes static.
    The partition is disjoint and exhaustive."""
    if tau_m <= 0:
        raise DataError(f"motion threshold must be positive, got {tau_m}")
    mag = np.linalg.norm(displacement_from_set(g, dt), axis=-1)
    static = mag <= tau_m
    return g.select(static), g.select(~static)


def flow_field(g: GaussianSet, dt: float) -> np.ndarray:
    """Per-Gaussian 3D flow over the interval: Gamma_i(dt), in world meters."""
    return displacement_from_set(g, dt)
