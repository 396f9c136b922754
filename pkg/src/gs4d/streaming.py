"""Causal, constant-memory streaming composition plus the offline
all-frame interpolation mode and a windowed causal attention kernel.

The scene over [t - stride, t] is the union of the previous and current
static subsets with the current dynamic subset warped backward (Gamma
evaluated at negative offsets). History older than t - stride is dropped,
so retained memory is bounded regardless of stream length.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError
from .motion import TAU_M_DEFAULT, split_static_dynamic, warp_gaussians
from .scene import GaussianSet

STRIDE_DEFAULT = 5
WINDOW_DEFAULT = 2  # strides of attention context in online mode


@dataclass
class ComposedScene:
    """Scene over [t - stride, t], grouped by provenance. Renderable at any
    query time tau inside the interval."""

    static_prev: GaussianSet
    static_curr: GaussianSet
    dynamic_curr: GaussianSet
    t_prev: int
    t_curr: int

    def at(self, tau: float) -> GaussianSet:
        """Gaussians positioned for query time tau in [t_prev, t_curr];
        dynamic Gaussians are backward-warped by Gamma(tau - t_curr)."""
        if not (self.t_prev <= tau <= self.t_curr):
            raise DataError(
                f"query time {tau} outside composed interval "
                f"[{self.t_prev}, {self.t_curr}]")
        moved = warp_gaussians(self.dynamic_curr, tau - self.t_curr)
        return GaussianSet.concat([self.static_prev, self.static_curr, moved])

    def __len__(self) -> int:
        return len(self.static_prev) + len(self.static_curr) + len(self.dynamic_curr)


@dataclass
class StreamState:
    """Bounded per-stride history for causal composition, with memory
    accounting (Gaussian and token counts, high-water marks)."""

    stride: int = STRIDE_DEFAULT
    window: int = WINDOW_DEFAULT
    tau_m: float = TAU_M_DEFAULT
    t: Optional[int] = None
    static_prev: GaussianSet = field(default_factory=GaussianSet.empty)
    t_prev: Optional[int] = None
    static_curr: GaussianSet = field(default_factory=GaussianSet.empty)
    dynamic_curr: GaussianSet = field(default_factory=GaussianSet.empty)
    token_window: List[np.ndarray] = field(default_factory=list)
    frame_count: int = 0
    retained_gaussians: int = 0
    retained_tokens: int = 0
    peak_gaussians: int = 0
    peak_tokens: int = 0

    def _account(self) -> None:
        self.retained_gaussians = (len(self.static_prev) + len(self.static_curr)
                                   + len(self.dynamic_curr))
        self.retained_tokens = sum(t.shape[0] for t in self.token_window)
        self.peak_gaussians = max(self.peak_gaussians, self.retained_gaussians)
        self.peak_tokens = max(self.peak_tokens, self.retained_tokens)


def ingest_frame(state: StreamState, frame_gaussians: GaussianSet,
                 timestamp: int, tokens: Optional[np.ndarray] = None,
                 tau_m: Optional[float] = None) -> Tuple[StreamState, ComposedScene]:
    """Advance the stream by one stride.

    Splits the new frame's Gaussians by motion magnitude over one stride,
    composes the interval scene, and evicts history older than t - stride.
    The first frame composes only itself (no history).
    """
    tau = state.tau_m if tau_m is None else tau_m
    if state.t is not None and timestamp != state.t + state.stride:
        raise DataError(
            f"out-of-order frame: expected timestamp {state.t + state.stride}, "
            f"got {timestamp}")
    static, dynamic = split_static_dynamic(frame_gaussians, state.stride, tau)
    if state.t is None:
        state.static_prev = GaussianSet.empty()
        state.t_prev = timestamp
    else:
        state.static_prev = state.static_curr  # evict anything older
        state.t_prev = state.t
    state.static_curr = static
    state.dynamic_curr = dynamic
    state.t = timestamp
    state.frame_count += 1
    if tokens is not None:
        state.token_window.append(np.asarray(tokens))
        while len(state.token_window) > state.window:
            state.token_window.pop(0)
    state._account()
    composed = ComposedScene(static_prev=state.static_prev, static_curr=static,
                             dynamic_curr=dynamic, t_prev=state.t_prev,
                             t_curr=timestamp)
    return state, composed


def compose_offline(snapshots: Sequence[Tuple[float, GaussianSet]], tau: float
                    ) -> GaussianSet:
    """Offline mode: union over all snapshots, each warped by
    Gamma(tau - t_snapshot). tau must lie within the observed window."""
    if not snapshots:
        raise DataError("compose_offline requires at least one snapshot")
    times = [t for t, _ in snapshots]
    if not (min(times) <= tau <= max(times)):
        raise DataError(f"target time {tau} outside observed window "
                        f"[{min(times)}, {max(times)}]")
    return GaussianSet.concat([warp_gaussians(g, tau - t) for t, g in snapshots])


def windowed_causal_attention(tokens: np.ndarray, window: int, heads: int
                              ) -> np.ndarray:
    """Scaled dot-product self-attention where tokens of frame t attend only
    to tokens of frames {t - window + 1, ..., t}.

    tokens: (T, N, d) with d divisible by heads. No learned projections; this
    kernel exists to validate causality and windowing, so Q = K = V = tokens.
    Output for frame t is a pure function of frames <= t.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 3:
        raise DataError(f"tokens must be (T, N, d), got shape {tokens.shape}")
    T, N, d = tokens.shape
    if window < 1:
        raise DataError("window must be >= 1")
    if heads < 1 or d % heads != 0:
        raise DataError(f"feature dim {d} not divisible by {heads} heads")
    dh = d // heads
    out = np.empty_like(tokens)
    for t in range(T):
        lo = max(0, t - window + 1)
        ctx = tokens[lo:t + 1].reshape(-1, d)          # (C, d)
        q = tokens[t].reshape(N, heads, dh)
        k = ctx.reshape(-1, heads, dh)
        scores = np.einsum("nhd,chd->hnc", q, k) / np.sqrt(dh)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=-1, keepdims=True)
        res = np.einsum("hnc,chd->nhd", attn, k)
        out[t] = res.reshape(N, d)
    return out
