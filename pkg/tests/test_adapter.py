import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from d2st.adapter import (AdapterConfig, ConvPathway, D2STAdapter, adapter_forward, count_tunable_params,
                          dst_conv_pathways, vanilla_adapter_forward)
from d2st.adsta import AdstaConfig, SamplingKernel
from d2st.errors import ConfigurationError, DimensionError
from d2st.layers import LinearLayer
from d2st.rng import SeededRng
from d2st.tensor import backward, tsum


def np_gelu(x):
    return x * ndtr(x)


SHAPE = (4, 4, 4)
TINY = AdapterConfig(0.5, "adsta", AdstaConfig("Uniform", SamplingKernel(2, 2)),
                     AdstaConfig("Uniform", SamplingKernel(2, 2)))


def randomize(module, rng, scale=0.3):
    for p in module.parameters():
        p.assign(rng.normal(p.shape, scale))


class TestVanilla:
    def test_zero_up_is_identity(self):
        x = SeededRng(0).normal((2, 3, 8))
        down, up = LinearLayer(8, 2, SeededRng(1)), LinearLayer(2, 8, init="zeros")
        assert np.array_equal(vanilla_adapter_forward(x, down, up).data, x)

    def test_zero_input(self):
        down, up = LinearLayer(8, 2, SeededRng(1)), LinearLayer(2, 8, SeededRng(2))
        out = vanilla_adapter_forward(np.zeros((3, 8)), down, up)
        assert np.array_equal(out.data, np.zeros((3, 8)))

    def test_two_step_manual(self):
        rng = SeededRng(3)
        x = rng.normal((5, 8))
        down, up = LinearLayer(8, 2, rng), LinearLayer(2, 8, rng)
        down.bias.assign(rng.normal((2,)))
        up.bias.assign(rng.normal((8,)))
        h = np_gelu(x @ down.weight.data + down.bias.data)
        expected = h @ up.weight.data + up.bias.data
        np.testing.assert_allclose(vanilla_adapter_forward(x, down, up, residual=False).data, expected, atol=1e-13)
        np.testing.assert_allclose(vanilla_adapter_forward(x, down, up).data, x + expected, atol=1e-13)

    def test_channel_chain(self):
        with pytest.raises(DimensionError):
            vanilla_adapter_forward(np.zeros((2, 8)), LinearLayer(8, 2, SeededRng(0)), LinearLayer(3, 8, SeededRng(0)))


class TestConvPathways:
    def test_delta_kernels_identity_norm(self):
        rng = SeededRng(0)
        s, t = ConvPathway(3, (1, 3, 3), rng), ConvPathway(3, (3, 1, 1), rng)
        for path in (s, t):
            k = np.zeros(path.conv.kernel.shape)
            k[tuple(d // 2 for d in k.shape[:3])] = 1.0
            path.conv.kernel.assign(k)
        v = SeededRng(1).normal((4, 4, 4, 3))
        v = (v - v.mean(axis=(0, 1, 2))) / np.sqrt(v.var(axis=(0, 1, 2)) + 1e-8)
        fs, ft = dst_conv_pathways(v, s, t)
        np.testing.assert_allclose(fs.data, np_gelu(v), atol=1e-6)
        np.testing.assert_allclose(ft.data, np_gelu(v), atol=1e-6)

    def test_constant_input_interior(self):
        path = ConvPathway(2, (1, 3, 3), SeededRng(2))
        v = np.ones((2, 5, 5, 2))
        v[..., 1] = -3.0
        out = path(v).data
        interior = out[:, 1:-1, 1:-1]
        assert np.allclose(interior, interior[:1, :1, :1], atol=1e-12)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(2, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
    def test_shape_preserved(self, t, h, w, c):
        # the norm needs at least two positions per channel
        rng = SeededRng(t * 100 + h * 10 + w)
        s, tp = ConvPathway(c, (1, 3, 3), rng), ConvPathway(c, (3, 1, 1), rng)
        v = rng.normal((t, h, w, c))
        fs, ft = dst_conv_pathways(v, s, tp)
        assert fs.shape == ft.shape == v.shape


class TestAdapter:
    @pytest.mark.parametrize("kind", ["adsta", "conv3d", "none"])
    def test_identity_at_init_bitwise(self, kind):
        cfg = AdapterConfig(0.5, kind, TINY.spatial_cfg, TINY.temporal_cfg)
        a = D2STAdapter(8, SHAPE, cfg, SeededRng(0))
        x = SeededRng(1).normal((2,) + SHAPE + (8,))
        assert np.array_equal(adapter_forward(x, a).data, x)

    @pytest.mark.parametrize("kind", ["adsta", "conv3d", "none"])
    def test_shape_preserved(self, kind):
        cfg = AdapterConfig(0.5, kind, TINY.spatial_cfg, TINY.temporal_cfg)
        a = D2STAdapter(8, SHAPE, cfg, SeededRng(0))
        randomize(a, SeededRng(1))
        x = SeededRng(2).normal(SHAPE + (8,))
        assert adapter_forward(x, a).shape == x.shape

    def test_hand_composition(self):
        # identity down/up, pathways replaced by the identity: GELU(v + v) = GELU(2x)
        a = D2STAdapter(4, SHAPE, AdapterConfig(1.0, "none", residual=False), SeededRng(0))
        a.down.weight.assign(np.eye(4))
        a.up.weight.assign(np.eye(4))
        a.spatial = a.temporal = lambda v, trace=None: v
        x = SeededRng(1).normal(SHAPE + (4,))
        np.testing.assert_allclose(adapter_forward(x, a).data, np_gelu(2 * x), atol=1e-15)

    def test_pathways_parallel_on_same_input(self):
        a = D2STAdapter(8, SHAPE, TINY, SeededRng(0))
        seen = []
        for name in ("spatial", "temporal"):
            inner = getattr(a, name)
            setattr(a, name, lambda v, trace=None, inner=inner: seen.append(v.data) or inner(v, trace))
        adapter_forward(SeededRng(1).normal(SHAPE + (8,)), a)
        assert len(seen) == 2 and seen[0] is seen[1]

    def test_residual_off(self):
        a = D2STAdapter(8, SHAPE, AdapterConfig(0.5, "none", residual=False), SeededRng(0))
        assert np.array_equal(adapter_forward(np.ones(SHAPE + (8,)), a).data, np.zeros(SHAPE + (8,)))

    def test_channel_mismatch(self):
        a = D2STAdapter(8, SHAPE, TINY, SeededRng(0))
        with pytest.raises(DimensionError):
            adapter_forward(np.zeros(SHAPE + (6,)), a)

    def test_up_zero_and_down_random(self):
        a = D2STAdapter(8, SHAPE, TINY, SeededRng(0))
        assert not np.any(a.up.weight.data) and not np.any(a.up.bias.data)
        assert np.any(a.down.weight.data)

    @pytest.mark.parametrize("kind", ["adsta", "conv3d", "none"])
    def test_gradient_flow(self, kind):
        cfg = AdapterConfig(0.5, kind, TINY.spatial_cfg, TINY.temporal_cfg)
        a = D2STAdapter(8, SHAPE, cfg, SeededRng(0))
        randomize(a, SeededRng(1))
        backward(tsum(adapter_forward(SeededRng(2).normal(SHAPE + (8,)), a) * SeededRng(3).normal(SHAPE + (8,))))
        dead = [n for n, p in a.named_parameters() if not np.any(p.grad)]
        assert dead == []

    def test_trace_per_pathway(self):
        a = D2STAdapter(8, SHAPE, TINY, SeededRng(0))
        trace = {}
        adapter_forward(SeededRng(1).normal(SHAPE + (8,)), a, trace)
        assert set(trace) == {"spatial", "temporal"}


class TestConfig:
    def test_bad_ratio(self):
        for r in (0.0, 1.5):
            with pytest.raises(ConfigurationError):
                AdapterConfig(r)

    def test_no_pathway(self):
        with pytest.raises(ConfigurationError):
            AdapterConfig(spatial_path=False, temporal_path=False)
        AdapterConfig(pathway_kind="none", spatial_path=False, temporal_path=False)

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            AdapterConfig(pathway_kind="lora")

    def test_bottleneck_rounding(self):
        assert AdapterConfig(0.25).bottleneck(64) == 16
        assert AdapterConfig(0.25).bottleneck(32) == 8
        with pytest.raises(ConfigurationError):
            AdapterConfig(0.1).bottleneck(4)


class TestParamCount:
    def test_vanilla_64(self):
        assert count_tunable_params(AdapterConfig(0.25, "none"), 64) == 64 * 16 + 16 + 16 * 64 + 64 == 2128

    @pytest.mark.parametrize("kind", ["adsta", "conv3d", "none"])
    def test_matches_instance(self, kind):
        cfg = AdapterConfig(0.25, kind)
        a = D2STAdapter(32, (8, 8, 8), cfg, SeededRng(0))
        assert count_tunable_params(cfg, 32) == a.num_parameters(trainable_only=True)

    @pytest.mark.parametrize("kind", ["adsta", "conv3d", "none"])
    def test_monotone_in_bottleneck(self, kind):
        assert count_tunable_params(AdapterConfig(0.5, kind), 64) > count_tunable_params(AdapterConfig(0.25, kind), 64)

    def test_conv3d_minus_none(self):
        c = 16
        diff = count_tunable_params(AdapterConfig(0.25, "conv3d"), 64) - count_tunable_params(AdapterConfig(0.25, "none"), 64)
        assert diff == (9 * c + c) + (3 * c + c) + 2 * (2 * c)
