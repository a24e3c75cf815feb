import numpy as np
import pytest

from cottention.causal import causal_oracle
from cottention.core_ops import bidirectional_cos_attention, l2_normalize_rows, stabilize_values
from cottention.errors import ConfigError, ShapeError, UsageError
from cottention.gradcheck import layer_report
from cottention.layer import (
    ToyTask,
    layer_backward,
    layer_forward,
    layer_init,
    merge_heads,
    normalize_backward,
    split_heads,
    train_toy,
)


def test_init_deterministic_and_m_default():
    a, b = layer_init(8, 4, 6, 2, seed=3), layer_init(8, 4, 6, 2, seed=3)
    for name, p in a.parameters().items():
        assert np.array_equal(p, b.parameters()[name])
    np.testing.assert_array_equal(a.m, [0.5, 0.5])
    assert a.W_Q.shape == (8, 4) and a.W_V.shape == (8, 6)


@pytest.mark.parametrize("dims", [(8, 3, 4, 2), (8, 4, 5, 2), (0, 4, 4, 2), (8, 4, 4, 0)])
def test_init_rejects_bad_dims(dims):
    with pytest.raises(ConfigError):
        layer_init(*dims)


def test_split_merge_roundtrip(rng):
    X = rng.standard_normal((2, 5, 6))
    assert split_heads(X, 3).shape == (2, 3, 5, 2)
    assert np.array_equal(merge_heads(split_heads(X, 3)), X)


class TestForward:
    def test_zero_input_gives_zero_output(self):
        layer = layer_init(4, 4, 4, 2)
        y, _ = layer_forward(layer, np.zeros((1, 3, 4)))
        assert not y.any()

    def test_identity_projection_single_head(self, rng):
        layer = layer_init(3, 3, 3, 1)
        layer.W_Q = layer.W_K = layer.W_V = np.eye(3)
        x = rng.standard_normal((1, 4, 3))
        y, _ = layer_forward(layer, x, causal=True)
        X = x[:, None]
        ref = causal_oracle(l2_normalize_rows(X), l2_normalize_rows(X), stabilize_values(X, 4, [0.5]))
        np.testing.assert_allclose(y, ref[:, 0], atol=1e-12)

    @pytest.mark.parametrize("causal", [True, False])
    def test_matches_composed_primitives(self, rng, causal):
        layer = layer_init(6, 4, 6, 2, seed=5)
        layer.m = np.array([-0.3, 1.1])
        x = rng.standard_normal((2, 7, 6))
        y, _ = layer_forward(layer, x, causal=causal, chunk_len=3)
        Q, K, V = (split_heads(x @ W, 2) for W in (layer.W_Q, layer.W_K, layer.W_V))
        if causal:
            O = causal_oracle(l2_normalize_rows(Q), l2_normalize_rows(K), stabilize_values(V, 7, layer.m))
        else:
            from cottention.config import AttentionConfig
            O = bidirectional_cos_attention(Q, K, V, AttentionConfig(2, 2, 7, 2, 3, m=layer.m), "scores-first")
        np.testing.assert_allclose(y, merge_heads(O), atol=1e-12)

    def test_qk_weight_scale_invariance(self, rng):
        layer = layer_init(6, 4, 4, 2, seed=1)
        x = rng.standard_normal((1, 5, 6))
        y0, _ = layer_forward(layer, x)
        scaled = layer.copy()
        scaled.W_Q = 3.0 * layer.W_Q
        scaled.W_K = 0.25 * layer.W_K
        np.testing.assert_allclose(layer_forward(scaled, x)[0], y0, atol=1e-12)

    def test_heads_are_independent(self, rng):
        layer = layer_init(6, 4, 4, 2, seed=1)
        x = rng.standard_normal((1, 5, 6))
        y0, _ = layer_forward(layer, x)
        other = layer.copy()
        other.W_V = layer.W_V.copy()
        other.W_V[:, 2:] *= -7.0
        other.m = np.array([0.5, 3.0])
        y1, _ = layer_forward(other, x)
        np.testing.assert_array_equal(y0[..., :2], y1[..., :2])

    def test_shape_errors(self):
        layer = layer_init(4, 4, 4, 2)
        with pytest.raises(ShapeError):
            layer_forward(layer, np.zeros((1, 3, 5)))
        with pytest.raises(ShapeError):
            layer_forward(layer, np.zeros((1, 3, 4)), pad=np.ones((1, 2), bool))
        with pytest.raises(ConfigError):
            layer_forward(layer, np.zeros((1, 3, 4)), stab_mode="nope")

    def test_padding_hides_padded_tokens(self, rng):
        layer = layer_init(4, 4, 4, 2, seed=2)
        x = rng.standard_normal((1, 6, 4))
        pad = np.array([[True] * 4 + [False] * 2])
        y, _ = layer_forward(layer, x, causal=False, pad=pad)
        x2 = x.copy()
        x2[:, 4:] = rng.standard_normal((1, 2, 4))
        y2, _ = layer_forward(layer, x2, causal=False, pad=pad)
        np.testing.assert_array_equal(y[:, :4], y2[:, :4])


class TestNormalizeBackward:
    def test_unit_basis_example(self):
        X = np.array([[2.0, 0.0]])
        np.testing.assert_allclose(normalize_backward(X, np.array([[1.0, 1.0]])), [[0.0, 0.5]])

    def test_orthogonal_to_row(self, rng):
        X, G = rng.standard_normal((10, 5)), rng.standard_normal((10, 5))
        dX = normalize_backward(X, G)
        np.testing.assert_allclose(np.sum(dX * X, axis=-1), 0.0, atol=1e-12)

    def test_zero_row_gets_zero_grad(self, rng):
        dX = normalize_backward(np.zeros((1, 3)), rng.standard_normal((1, 3)))
        assert not dX.any()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            normalize_backward(np.zeros((2, 3)), np.zeros((2, 2)))


class TestBackward:
    def test_zero_upstream(self, rng):
        layer = layer_init(4, 4, 4, 2)
        x = rng.standard_normal((1, 5, 4))
        _, cache = layer_forward(layer, x)
        for g in layer_backward(layer, cache, np.zeros((1, 5, 4))).as_dict().values():
            assert not g.any()

    @pytest.mark.parametrize("causal", [True, False])
    @pytest.mark.parametrize("stab_mode", ["fixed", "growing"])
    def test_finite_differences(self, rng, causal, stab_mode):
        layer = layer_init(4, 4, 4, 2, seed=9)
        layer.m = np.array([-0.4, 0.9])
        x = rng.standard_normal((2, 5, 4))
        dY = rng.standard_normal((2, 5, 4))
        report = layer_report(layer, x, dY, causal=causal, chunk_len=2, stab_mode=stab_mode)
        assert report.passed, report

    def test_finite_differences_with_padding(self, rng):
        layer = layer_init(4, 4, 4, 2, seed=9)
        x = rng.standard_normal((2, 5, 4))
        dY = rng.standard_normal((2, 5, 4))
        pad = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], bool)
        assert layer_report(layer, x, dY, causal=False, pad=pad).passed

    def test_dm_sign_matches_two_point_difference(self, rng):
        layer = layer_init(4, 4, 4, 2, seed=4)
        x = rng.standard_normal((1, 6, 4))
        dY = rng.standard_normal((1, 6, 4))
        _, cache = layer_forward(layer, x)
        dm = layer_backward(layer, cache, dY).dm
        for h in range(2):
            up, down = layer.copy(), layer.copy()
            up.m = layer.m.copy()
            down.m = layer.m.copy()
            up.m[h] += 1e-4
            down.m[h] -= 1e-4
            diff = np.sum(dY * layer_forward(up, x)[0]) - np.sum(dY * layer_forward(down, x)[0])
            assert np.sign(diff) == np.sign(dm[h])

    def test_length_one_gives_zero_dm(self, rng):
        layer = layer_init(4, 4, 4, 2)
        x = rng.standard_normal((3, 1, 4))
        _, cache = layer_forward(layer, x)
        dm = layer_backward(layer, cache, rng.standard_normal((3, 1, 4))).dm
        assert np.all(dm == 0.0)

    def test_stale_cache_rejected(self, rng):
        layer = layer_init(4, 4, 4, 2)
        x = rng.standard_normal((1, 3, 4))
        y, cache = layer_forward(layer, x)
        grads = layer_backward(layer, cache, np.ones_like(y))
        layer.apply_update(grads, 0.1)
        with pytest.raises(UsageError):
            layer_backward(layer, cache, np.ones_like(y))
        with pytest.raises(UsageError):
            layer_backward(layer.copy(), layer_forward(layer, x)[1], np.ones_like(y))

    def test_dy_shape_checked(self, rng):
        layer = layer_init(4, 4, 4, 2)
        _, cache = layer_forward(layer, rng.standard_normal((1, 3, 4)))
        with pytest.raises(ShapeError):
            layer_backward(layer, cache, np.zeros((1, 3, 2)))


class TestTraining:
    def test_deterministic(self):
        a, b = train_toy(steps=5), train_toy(steps=5)
        assert a.loss == b.loss
        assert all(np.array_equal(x, y) for x, y in zip(a.m_trace, b.m_trace))

    def test_trace_lengths(self):
        r = train_toy(steps=7)
        assert len(r.loss) == 8 and len(r.m_trace) == 8

    def test_zero_lr_freezes_everything(self):
        r = train_toy(steps=5, lr=0.0)
        assert len(set(r.loss)) == 1
        assert all(np.array_equal(m, r.m_trace[0]) for m in r.m_trace)

    def test_loss_at_least_halves(self):
        r = train_toy(steps=200)
        assert not r.diverged
        assert r.loss[-1] <= 0.5 * r.loss[0]

    def test_teacher_targets_are_fixed(self):
        x1, y1 = ToyTask().make()
        x2, y2 = ToyTask().make()
        assert np.array_equal(x1, x2) and np.array_equal(y1, y2)

    @pytest.mark.parametrize("kw", [{"steps": 0}, {"lr": -1.0}])
    def test_bad_arguments(self, kw):
        with pytest.raises(ConfigError):
            train_toy(**kw)
