import numpy as np
import pytest

from scoretok import nn
from scoretok import tensor as T
from scoretok.gradcheck import check_gradients
from scoretok.nn import FULL, DecoderLayerConfig
from scoretok.tensor import Tensor

TOL = 1e-5


def projected(out, seed=7):
    return (out * np.random.default_rng(seed).normal(size=out.shape)).sum()


def brute_force_attention(x, wq, wk, wv, wo, window):
    """Single head, no RoPE: softmax(QK^T/sqrt(d) + causal mask) V, row by row."""
    n, d = x.shape
    q, k, v = x @ wq, x @ wk, x @ wv
    out = np.zeros_like(x)
    for i in range(n):
        lo = 0 if window == FULL else max(0, i - window + 1)
        s = np.array([q[i] @ k[j] / np.sqrt(d) for j in range(lo, i + 1)])
        w = np.exp(s - s.max())
        w /= w.sum()
        out[i] = sum(w[t] * v[lo + t] for t in range(len(w)))
    return out @ wo


class TestAttention:
    @pytest.mark.parametrize("window", [FULL, 2])
    def test_matches_dense_formula(self, window, monkeypatch):
        rng = np.random.default_rng(0)
        d = 4
        att = nn.Attention(d, 1, window, rng=rng)
        monkeypatch.setattr(nn, "rope", lambda x, positions=None, base=None: x)
        x = rng.normal(size=(3, d))
        got = att(Tensor(x[None]))
        want = brute_force_attention(x, att.wq.data, att.wk.data, att.wv.data, att.wo.data, window)
        np.testing.assert_allclose(got.data[0], want, rtol=0, atol=1e-12)

    def test_window_one_is_value_projection(self):
        rng = np.random.default_rng(1)
        att = nn.Attention(8, 2, 1, rng=rng)
        x = rng.normal(size=(1, 6, 8))
        got = att(Tensor(x)).data
        np.testing.assert_allclose(got, x @ att.wv.data @ att.wo.data, atol=1e-12)

    def test_large_window_equals_full_bitwise(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(2, 9, 8)))
        a = nn.Attention(8, 2, 9, rng=np.random.default_rng(3))
        b = nn.Attention(8, 2, FULL, rng=np.random.default_rng(3))
        np.testing.assert_array_equal(a(x).data, b(x).data)

    @pytest.mark.parametrize("n,window", [(7, 3), (100, 5), (70, 40), (40, FULL)])
    def test_chunked_kernel_matches_composed_graph(self, n, window):
        rng = np.random.default_rng(4)
        qkv = [Tensor(rng.normal(size=(2, 2, n, 4)), requires_grad=True) for _ in range(3)]
        r = rng.normal(size=(2, 2, n, 4))
        nn.attend(*qkv, window).__mul__(r).sum().backward()
        g1 = [t.grad.copy() for t in qkv]
        for t in qkv:
            t.grad = None
        ref = nn.dense_attention(*qkv, nn.attention_mask(n, window))
        (ref * r).sum().backward()
        np.testing.assert_allclose(nn.attend(*qkv, window).data, ref.data, atol=1e-13)
        for a, b in zip(g1, qkv):
            np.testing.assert_allclose(a, b.grad, atol=1e-13)

    @pytest.mark.parametrize("window", [FULL, 3])
    def test_causality_bit_exact(self, window):
        rng = np.random.default_rng(5)
        att = nn.Attention(8, 2, window, rng=rng)
        x = rng.normal(size=(1, 12, 8))
        base = att(Tensor(x)).data
        for k in range(12):
            xp = x.copy()
            xp[0, k] += rng.normal(size=8)
            out = att(Tensor(xp)).data
            np.testing.assert_array_equal(out[0, :k], base[0, :k])
            if window != FULL:
                assert np.array_equal(out[0, k + window:], base[0, k + window:])

    def test_window_must_be_positive(self):
        with pytest.raises(ValueError):
            nn.attention_mask(4, 0)
        with pytest.raises(ValueError):
            DecoderLayerConfig(8, 2, 8, 0)

    def test_gradcheck(self):
        rng = np.random.default_rng(6)
        att = nn.Attention(8, 2, 3, rng=rng)
        x = Tensor(rng.uniform(-2, 2, size=(2, 7, 8)), requires_grad=True)
        errs = check_gradients(lambda: projected(att(x)), [x] + att.parameters())
        assert max(errs) < TOL


class TestRMSNorm:
    def test_ones_map_to_ones(self):
        out = nn.rmsnorm(Tensor(np.ones((3, 5))), Tensor(np.ones(5)))
        np.testing.assert_allclose(out.data, 1.0, atol=1e-6)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 6))
        g = Tensor(rng.normal(size=6))
        np.testing.assert_allclose(nn.rmsnorm(Tensor(7 * x), g).data, nn.rmsnorm(Tensor(x), g).data,
                                   rtol=1e-5)  # eps=1e-6 inside the root

    def test_unit_rms(self):
        rng = np.random.default_rng(1)
        out = nn.rmsnorm(Tensor(rng.normal(size=(5, 16)) * 3), Tensor(np.ones(16))).data
        np.testing.assert_allclose(np.sqrt((out ** 2).mean(-1)), 1.0, rtol=1e-6)

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.uniform(-2, 2, size=(3, 6)), requires_grad=True)
        g = Tensor(rng.uniform(-2, 2, size=6), requires_grad=True)
        assert max(check_gradients(lambda: projected(nn.rmsnorm(x, g)), [x, g])) < TOL


class TestGeGLU:
    def test_zero_in_zero_out(self):
        mlp = nn.GeGLU(8, 32)
        np.testing.assert_array_equal(mlp(Tensor(np.zeros((5, 8)))).data, 0.0)

    def test_shape(self):
        assert nn.geglu_mlp(Tensor(np.ones((5, 8))), 16).shape == (5, 8)

    def test_gradcheck(self):
        rng = np.random.default_rng(3)
        mlp = nn.GeGLU(6, 12, rng)
        x = Tensor(rng.uniform(-2, 2, size=(4, 6)), requires_grad=True)
        assert max(check_gradients(lambda: projected(mlp(x)), [x] + mlp.parameters())) < TOL


class TestRope:
    def test_position_zero_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 8))
        np.testing.assert_array_equal(nn.rope(Tensor(x)).data, x)

    def test_pairwise_norms_preserved(self):
        x = np.random.default_rng(1).normal(size=(2, 10, 8))
        y = nn.rope(Tensor(x)).data
        h = 4
        np.testing.assert_allclose(x[..., :h] ** 2 + x[..., h:] ** 2,
                                   y[..., :h] ** 2 + y[..., h:] ** 2, rtol=1e-12)

    def test_relative_position_property(self):
        rng = np.random.default_rng(2)
        q, k = rng.normal(size=8), rng.normal(size=8)

        def dot(i, j):
            qi = nn.rope(Tensor(q[None]), positions=np.array([i])).data[0]
            kj = nn.rope(Tensor(k[None]), positions=np.array([j])).data[0]
            return qi @ kj

        for _ in range(20):
            i, j, s = rng.integers(0, 200, size=3)
            assert dot(i, j) == pytest.approx(dot(i + s, j + s), rel=1e-9, abs=1e-9)

    def test_odd_head_dim_rejected(self):
        with pytest.raises(ValueError, match="even"):
            nn.rope(Tensor(np.ones((3, 5))))

    def test_gradcheck(self):
        x = Tensor(np.random.default_rng(3).uniform(-2, 2, size=(2, 5, 6)), requires_grad=True)
        assert max(check_gradients(lambda: projected(nn.rope(x)), [x])) < TOL


class TestSoftcap:
    def test_values(self):
        assert nn.softcap(Tensor(0.0), 30.0).item() == 0.0
        xs = np.array([-1e6, -50.0, 0.3, 50.0, 1e6])
        assert np.all(np.abs(nn.softcap(Tensor(xs), 30.0).data) <= 30.0)
        assert np.all(np.diff(nn.softcap(Tensor(xs), 30.0).data) > 0)

    def test_unit_slope_at_origin(self):
        h = 1e-5
        f = lambda x: nn.softcap(Tensor(x), 30.0).item()
        assert (f(h) - f(-h)) / (2 * h) == pytest.approx(1.0, abs=1e-9)


def test_decoder_layer_config_invariants():
    assert DecoderLayerConfig.byte_level(16, 4, 8).mlp_hidden == 16
    assert DecoderLayerConfig.token_level(16, 4).mlp_hidden == 64
    with pytest.raises(ValueError, match="divisible"):
        DecoderLayerConfig(10, 3, 10)


def test_decoder_layer_gradcheck_and_causality():
    rng = np.random.default_rng(8)
    layer = nn.DecoderLayer(DecoderLayerConfig(8, 2, 8, 3), rng)
    x = Tensor(rng.uniform(-2, 2, size=(1, 6, 8)), requires_grad=True)
    assert max(check_gradients(lambda: projected(layer(x)), [x] + layer.parameters())) < TOL
    base = layer(Tensor(x.data)).data
    xp = x.data.copy()
    xp[0, 3] += 1.0
    np.testing.assert_array_equal(layer(Tensor(xp)).data[0, :3], base[0, :3])
