import numpy as np
import pytest

from conftest import random_scene
from gs4d.errors import DataError
from gs4d.motion import displacement, motion_coefficient, warp_gaussians
from gs4d.streaming import (ComposedScene, StreamState, compose_offline,
                            ingest_frame, windowed_causal_attention)
from oracles import dense_masked_attention


def frame(rng, n=20):
    return random_scene(rng, n=n, with_motion=True)


class TestIngest:
    def test_first_frame_composes_alone(self, rng):
        state = StreamState()
        state, comp = ingest_frame(state, frame(rng), 0)
        assert len(comp.static_prev) == 0
        assert len(comp) == 20
        assert comp.t_prev == comp.t_curr == 0

    def test_out_of_order_rejected(self, rng):
        state = StreamState(stride=5)
        state, _ = ingest_frame(state, frame(rng), 0)
        with pytest.raises(DataError):
            ingest_frame(state, frame(rng), 3)

    def test_partition_respects_threshold(self, rng):
        g = frame(rng, n=50)
        state = StreamState(stride=5, tau_m=0.05)
        state, comp = ingest_frame(state, g, 0)
        for i in range(len(comp.static_curr)):
            m = motion_coefficient(comp.static_curr.speeds[i], comp.static_curr.dirs[i])
            assert np.linalg.norm(displacement(m, 5)) <= 0.05
        for i in range(len(comp.dynamic_curr)):
            m = motion_coefficient(comp.dynamic_curr.speeds[i], comp.dynamic_curr.dirs[i])
            assert np.linalg.norm(displacement(m, 5)) > 0.05

    def test_history_bounded(self, rng):
        state = StreamState(stride=5)
        for k in range(200):
            state, comp = ingest_frame(state, frame(rng, n=30), 5 * k,
                                       tokens=rng.normal(size=(8, 16)))
        assert state.retained_gaussians <= 3 * 30
        assert state.retained_tokens == 2 * 8  # window of 2 strides
        assert state.peak_gaussians <= 3 * 30
        assert state.frame_count == 200

    def test_eviction_keeps_only_previous_static(self, rng):
        state = StreamState(stride=5)
        marks = []
        for k in range(4):
            g = frame(rng, n=10)
            marks.append(g.mu.sum())
            state, comp = ingest_frame(state, g, 5 * k)
        # static_prev must come from frame 2, nothing older survives
        assert comp.t_prev == 10 and comp.t_curr == 15


class TestComposedScene:
    def test_query_at_current_time_identity(self, rng):
        state = StreamState(stride=5)
        g = frame(rng)
        state, comp = ingest_frame(state, g, 0)
        got = comp.at(0)
        assert {tuple(r) for r in got.mu} == {tuple(r) for r in g.mu}

    def test_backward_warp_inside_interval(self, rng):
        state = StreamState(stride=5, tau_m=0.01)
        state, _ = ingest_frame(state, frame(rng), 0)
        g = frame(rng)
        state, comp = ingest_frame(state, g, 5)
        got = comp.at(2.0)
        moved = warp_gaussians(comp.dynamic_curr, 2.0 - comp.t_curr)
        manual = np.vstack([comp.static_prev.mu, comp.static_curr.mu, moved.mu])
        np.testing.assert_allclose(np.sort(got.mu, axis=0), np.sort(manual, axis=0))

    def test_out_of_interval_rejected(self, rng):
        state = StreamState(stride=5)
        state, _ = ingest_frame(state, frame(rng), 0)
        state, comp = ingest_frame(state, frame(rng), 5)
        with pytest.raises(DataError):
            comp.at(-1.0)
        with pytest.raises(DataError):
            comp.at(5.5)


class TestOffline:
    def test_single_snapshot(self, rng):
        g = frame(rng)
        out = compose_offline([(0.0, g)], 0.0)
        np.testing.assert_array_equal(out.mu, g.mu)

    def test_union_of_warps(self, rng):
        g1, g2 = frame(rng, 5), frame(rng, 7)
        out = compose_offline([(0.0, g1), (10.0, g2)], 4.0)
        assert len(out) == 12
        np.testing.assert_allclose(out.mu[:5], warp_gaussians(g1, 4.0).mu)
        np.testing.assert_allclose(out.mu[5:], warp_gaussians(g2, -6.0).mu)

    def test_out_of_window(self, rng):
        with pytest.raises(DataError):
            compose_offline([(0.0, frame(rng))], 1.0)
        with pytest.raises(DataError):
            compose_offline([], 0.0)


class TestAttention:
    def test_matches_dense_masked_oracle(self, rng):
        tokens = rng.normal(size=(6, 4, 8))
        for window in (1, 2, 3, 6, 10):
            for heads in (1, 2, 4):
                got = windowed_causal_attention(tokens, window, heads)
                want = dense_masked_attention(tokens, window, heads)
                np.testing.assert_allclose(got, want, atol=1e-6)

    def test_causality_bitwise(self, rng):
        tokens = rng.normal(size=(8, 3, 8))
        base = windowed_causal_attention(tokens, 2, 2)
        # changing only future frames leaves earlier outputs untouched
        mod = tokens.copy()
        mod[5:] += rng.normal(size=(3, 3, 8)) * 10
        out = windowed_causal_attention(mod, 2, 2)
        assert np.array_equal(out[:5], base[:5])

    def test_window_one_is_per_frame(self, rng):
        tokens = rng.normal(size=(4, 5, 8))
        out = windowed_causal_attention(tokens, 1, 2)
        for t in range(4):
            solo = windowed_causal_attention(tokens[t:t + 1], 1, 2)
            np.testing.assert_allclose(out[t], solo[0], atol=1e-12)

    def test_uniform_tokens_fixed_point(self):
        tokens = np.ones((3, 4, 8))
        out = windowed_causal_attention(tokens, 2, 2)
        np.testing.assert_allclose(out, tokens)

    def test_validation(self, rng):
        with pytest.raises(DataError):
            windowed_causal_attention(rng.normal(size=(3, 4)), 2, 2)
        with pytest.raises(DataError):
            windowed_causal_attention(rng.normal(size=(3, 4, 8)), 0, 2)
        with pytest.raises(DataError):
            windowed_causal_attention(rng.normal(size=(3, 4, 8)), 2, 3)
