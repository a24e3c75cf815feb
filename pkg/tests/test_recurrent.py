import numpy as np
import pytest

from cottention import memory
from cottention.causal import causal_cos_attention, causal_oracle
from cottention.config import AttentionConfig
from cottention.core_ops import l2_normalize_rows, softmax_attention, stabilize_values
from cottention.errors import ShapeError
from cottention.recurrent import (
    softmax_kv_stream,
    state_init,
    state_readout,
    state_update,
    stream_sequence,
)

from conftest import qkv


@pytest.fixture
def cfg():
    return AttentionConfig(N=1, H=2, s=5, d_key=4, d_value=3)


class TestState:
    def test_init_is_zero(self, cfg):
        st = state_init(cfg)
        assert st.t == 0 and st.Hstate.shape == (1, 2, 3, 4) and not st.Hstate.any()

    def test_element_count(self):
        st = state_init(AttentionConfig(N=1, H=2, s=9, d_key=4, d_value=3))
        assert st.Hstate.size == 1 * 2 * 3 * 4

    def test_init_deterministic(self, cfg):
        assert np.array_equal(state_init(cfg).Hstate, state_init(cfg).Hstate)

    def test_updates_accumulate_outer_products(self, cfg, rng):
        st = state_init(cfg)
        ks = rng.standard_normal((5, 1, 2, 4))
        vs = rng.standard_normal((5, 1, 2, 3))
        state_update(st, ks[0], vs[0])
        np.testing.assert_array_equal(st.Hstate, vs[0][..., :, None] * ks[0][..., None, :])
        for k, v in zip(ks[1:], vs[1:]):
            state_update(st, k, v)
        direct = sum(np.einsum("nhv,nhk->nhvk", v, k) for k, v in zip(ks, vs))
        np.testing.assert_allclose(st.Hstate, direct, atol=1e-12)
        assert st.t == 5

    def test_copy_on_update_keeps_old_state(self, cfg, rng):
        st = state_init(cfg)
        new = state_update(st, rng.standard_normal((1, 2, 4)), rng.standard_normal((1, 2, 3)), inplace=False)
        assert st.t == 0 and not st.Hstate.any()
        assert new.t == 1 and new.Hstate.any()

    def test_readout_rank_one(self, cfg, rng):
        st = state_init(cfg)
        k, v, q = rng.standard_normal((1, 2, 4)), rng.standard_normal((1, 2, 3)), rng.standard_normal((1, 2, 4))
        state_update(st, k, v)
        expected = np.einsum("nhk,nhk->nh", q, k)[..., None] * v
        np.testing.assert_allclose(state_readout(st, q), expected, atol=1e-14)

    def test_readout_zero_state(self, cfg, rng):
        assert not state_readout(state_init(cfg), rng.standard_normal((1, 2, 4))).any()

    def test_readout_matches_scalar_loop(self, cfg, rng):
        st = state_init(cfg)
        st.Hstate[...] = rng.standard_normal(st.Hstate.shape)
        q = rng.standard_normal((1, 2, 4))
        ref = np.zeros((1, 2, 3))
        for h in range(2):
            for i in range(3):
                ref[0, h, i] = sum(st.Hstate[0, h, i, j] * q[0, h, j] for j in range(4))
        np.testing.assert_allclose(state_readout(st, q), ref, atol=1e-12)

    def test_shape_errors(self, cfg, rng):
        st = state_init(cfg)
        with pytest.raises(ShapeError):
            state_update(st, rng.standard_normal((1, 2, 3)), rng.standard_normal((1, 2, 3)))
        with pytest.raises(ShapeError):
            state_readout(st, rng.standard_normal((1, 2, 3)))

    def test_update_linearity_in_key(self, cfg, rng):
        k, v, q = rng.standard_normal((1, 2, 4)), rng.standard_normal((1, 2, 3)), rng.standard_normal((1, 2, 4))
        one = state_readout(state_update(state_init(cfg), k, v), q)
        scaled = state_readout(state_update(state_init(cfg), 2.5 * k, v), q)
        np.testing.assert_allclose(scaled, 2.5 * one, atol=1e-12)

    def test_state_size_independent_of_t(self, cfg, rng):
        st = state_init(cfg)
        size = st.nbytes
        for _ in range(50):
            state_update(st, rng.standard_normal((1, 2, 4)), rng.standard_normal((1, 2, 3)))
        assert st.nbytes == size

    def test_compensated_close_to_exact_sum(self, cfg):
        rng = np.random.default_rng(7)
        ks = rng.standard_normal((400, 1, 2, 4))
        vs = rng.standard_normal((400, 1, 2, 3)) * 1e-3
        plain, comp = state_init(cfg), state_init(cfg, compensated=True)
        plain.Hstate += 1e4
        comp.Hstate += 1e4
        for k, v in zip(ks, vs):
            state_update(plain, k, v)
            state_update(comp, k, v)
        exact = np.einsum("tnhv,tnhk->nhvk", vs.astype(np.longdouble), ks.astype(np.longdouble)) + 1e4
        err_plain = np.max(np.abs(plain.Hstate - exact))
        err_comp = np.max(np.abs(comp.Hstate - exact))
        assert err_comp <= err_plain


class TestStream:
    def test_single_token(self, rng):
        Q, K, V = qkv(rng, 1, 2, 1, 3, 3)
        assert np.array_equal(stream_sequence(Q, K, V), causal_cos_attention(Q, K, V))

    def test_matches_batch_and_oracle(self, rng):
        Q, K, V = qkv(rng, 1, 2, 48, 8, 8)
        cfg = AttentionConfig(1, 2, 48, 8, 8, m=[0.2, -0.7])
        streamed = stream_sequence(Q, K, V, cfg)
        batch = causal_cos_attention(Q, K, V, cfg, chunk_len=16)
        oracle = causal_oracle(l2_normalize_rows(Q), l2_normalize_rows(K), stabilize_values(V, 48, cfg.m))
        assert np.max(np.abs(streamed - batch)) < 1e-9
        assert np.max(np.abs(streamed - oracle)) < 1e-9

    def test_growing_mode_matches_growing_batch(self, rng):
        Q, K, V = qkv(rng, 2, 1, 20, 3, 3)
        cfg = AttentionConfig(2, 1, 20, 3, 3, stab_mode="growing")
        assert np.max(np.abs(stream_sequence(Q, K, V, cfg) - causal_cos_attention(Q, K, V, cfg))) < 1e-9
        fixed = causal_cos_attention(Q, K, V, AttentionConfig(2, 1, 20, 3, 3))
        assert np.max(np.abs(stream_sequence(Q, K, V, cfg) - fixed)) > 1e-3

    def test_step_bytes_constant_across_steps_and_lengths(self, rng):
        seen = set()
        for s in (256, 2048):
            Q, K, V = qkv(rng, 1, 2, s, 4, 4)
            _, steps = stream_sequence(Q, K, V, return_step_bytes=True)
            assert len(steps) == s
            seen.update(steps)
        assert len(seen) == 1

    def test_outer_tracker_sees_whole_call_peak(self, rng):
        Q, K, V = qkv(rng, 1, 1, 16, 2, 2)
        with memory.track() as t:
            _, steps = stream_sequence(Q, K, V, return_step_bytes=True)
        assert t.peak == max(steps) and t.current == 0

    def test_past_token_order_does_not_matter(self, rng):
        Q, K, V = qkv(rng, 1, 1, 8, 3, 3)
        perm = np.concatenate([rng.permutation(7), [7]])
        a = stream_sequence(Q, K, V)
        b = stream_sequence(Q, K[:, :, perm], V[:, :, perm])
        np.testing.assert_allclose(a[:, :, 7], b[:, :, 7], atol=1e-12)


class TestKVBaseline:
    def test_matches_causal_softmax(self, rng):
        Q, K, V = qkv(rng, 1, 2, 12, 4, 3)
        np.testing.assert_allclose(softmax_kv_stream(Q, K, V), softmax_attention(Q, K, V, causal=True), atol=1e-12)

    def test_cache_grows(self, rng):
        Q, K, V = qkv(rng, 1, 1, 30, 4, 4)
        _, steps = softmax_kv_stream(Q, K, V, return_step_bytes=True)
        assert all(b > a for a, b in zip(steps, steps[1:]))
