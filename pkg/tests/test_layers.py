import math

import numpy as np
import pytest

from slicenet import tensor as T
from slicenet.convops import ConvSpec, Mode
from slicenet.errors import ConfigurationError, DimensionError
from slicenet.layers import (
    AttentionModule,
    ConvModule,
    ConvModuleConfig,
    ConvStep,
    LayerNormParams,
    add_timing,
    attend,
    attention_weights,
    layer_norm,
    timing_signal,
)
from slicenet.tensor import Rng, Tensor, finite_difference_check


def probe_loss(out: Tensor, seed: int = 7) -> Tensor:
    # random linear functional so every output coordinate matters
    r = np.random.default_rng(seed).normal(size=out.shape)
    return T.tsum(T.mul(out, Tensor(r)))


def max_param_error(fn, params, x):
    worst = 0.0
    for p in params:
        worst = max(worst, finite_difference_check(lambda _: probe_loss(fn(x)), p))
    worst = max(worst, finite_difference_check(lambda t: probe_loss(fn(t)), x))
    return worst


class TestLayerNorm:
    def test_hand_example(self):
        out = layer_norm(Tensor(np.array([[[1.0, 2.0, 3.0]]])), LayerNormParams()).data
        np.testing.assert_allclose(out[0, 0], [-1.22474395, 0.0, 1.22474395], atol=1e-8)

    def test_population_variance_and_scalars(self, nprng):
        x = nprng.normal(size=(2, 3, 6)) * 4 + 2
        ln = LayerNormParams(Tensor(2.0, requires_grad=True), Tensor(0.5, requires_grad=True))
        out = layer_norm(Tensor(x), ln).data
        want = 2.0 * (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-6) + 0.5
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_constant_row_is_finite(self):
        out = layer_norm(Tensor(np.full((1, 2, 4), 3.0)), LayerNormParams()).data
        assert np.all(np.isfinite(out)) and np.all(out == 0.0)

    def test_rank2_input(self, nprng):
        x = nprng.normal(size=(3, 5))
        a = layer_norm(Tensor(x), LayerNormParams()).data
        b = layer_norm(Tensor(x[None]), LayerNormParams()).data[0]
        np.testing.assert_array_equal(a, b)

    def test_gradients(self, nprng):
        ln = LayerNormParams(Tensor(1.3, requires_grad=True), Tensor(-0.4, requires_grad=True))
        x = Tensor(nprng.normal(size=(2, 3, 5)), requires_grad=True)
        err = max_param_error(lambda t: layer_norm(t, ln), [ln.gain, ln.bias], x)
        assert err < 1e-4


class TestConvStep:
    @pytest.mark.parametrize("mode", list(Mode))
    @pytest.mark.parametrize("padding", ["same", "causal"])
    def test_gradients(self, mode, padding, nprng):
        spec = ConvSpec(k=3, d=2, c_in=6, c_out=6, mode=mode, g=2, padding=padding)
        step = ConvStep(spec, Rng(3))
        x = Tensor(nprng.normal(size=(2, 5, 6)), requires_grad=True)
        assert max_param_error(step, [t for _, t in step.named()], x) < 1e-4

    def test_structure(self, nprng):
        spec = ConvSpec(k=3, c_in=4, c_out=4)
        step = ConvStep(spec, Rng(0))
        x = nprng.normal(size=(1, 6, 4))
        # ReLU first: negative inputs are invisible
        np.testing.assert_array_equal(step(Tensor(x)).data, step(Tensor(np.maximum(x, 0))).data)
        assert [n for n, _ in step.named()] == ["depthwise", "pointwise", "ln_gain", "ln_bias"]

    def test_mask_zeroes_positions(self, nprng):
        step = ConvStep(ConvSpec(k=3, c_in=4, c_out=4), Rng(0))
        x = nprng.normal(size=(1, 6, 4))
        mask = np.ones((1, 6, 1))
        mask[0, 4:] = 0
        x2 = x.copy()
        x2[0, 4:] = 99.0
        np.testing.assert_array_equal(step(Tensor(x), mask).data, step(Tensor(x2), mask).data)

    def test_depth_mismatch(self):
        step = ConvStep(ConvSpec(k=3, c_in=4, c_out=4), Rng(0))
        with pytest.raises(DimensionError):
            step(Tensor(np.zeros((1, 3, 5))))


def module_specs(c=4, steps=((3, 1), (3, 1), (5, 1), (5, 2)), padding="same", mode="separable"):
    return [ConvSpec(k=k, d=d, c_in=c, c_out=c, padding=padding, mode=mode) for k, d in steps]


class TestConvModule:
    def test_default_layout(self):
        cfg = ConvModuleConfig()
        assert cfg.steps == [(3, 1), (3, 1), (15, 1), (15, 8)]
        assert cfg.residual_after == (2, 4)
        assert cfg.dropout_p == 0.5

    def test_residual_wiring(self, nprng):
        cfg = ConvModuleConfig(steps=[(3, 1), (3, 1), (5, 1), (5, 2)])
        mod = ConvModule(module_specs(), cfg, Rng(1))
        x = Tensor(nprng.normal(size=(2, 7, 4)))
        s = mod.steps
        h2 = T.add(x, s[1](s[0](x)))
        want = T.add(x, s[3](s[2](h2))).data
        np.testing.assert_allclose(mod(x).data, want, rtol=0, atol=0)

    def test_gradients(self, nprng):
        cfg = ConvModuleConfig(steps=[(3, 1), (3, 1), (5, 1), (5, 2)])
        mod = ConvModule(module_specs(), cfg, Rng(1))
        x = Tensor(nprng.normal(size=(1, 6, 4)), requires_grad=True)
        params = [t for _, t in mod.named()]
        assert max_param_error(mod, params, x) < 1e-4

    def test_dropout_only_in_training(self, nprng):
        cfg = ConvModuleConfig(steps=[(3, 1), (3, 1)], residual_after=(2,), dropout_p=0.5)
        mod = ConvModule(module_specs(steps=((3, 1), (3, 1))), cfg, Rng(1))
        x = Tensor(nprng.normal(size=(2, 8, 4)))
        np.testing.assert_array_equal(mod(x).data, mod(x, training=False).data)
        dropped = mod(x, training=True, rng=Rng(5)).data
        assert np.mean(dropped == 0.0) > 0.2
        with pytest.raises(ConfigurationError, match="Rng"):
            mod(x, training=True)

    @pytest.mark.parametrize(
        "kw",
        [dict(steps=[]), dict(steps=[(0, 1)]), dict(residual_after=(5,)), dict(dropout_p=1.0)],
    )
    def test_config_validation(self, kw):
        with pytest.raises(ConfigurationError):
            ConvModuleConfig(**kw)

    def test_depth_changing_step_rejected(self):
        specs = module_specs()
        specs[1] = ConvSpec(k=3, c_in=4, c_out=8)
        with pytest.raises(ConfigurationError, match="preserve depth"):
            ConvModule(specs, ConvModuleConfig(steps=[(3, 1), (3, 1), (5, 1), (5, 2)]))


class TestTiming:
    def test_values(self):
        sig = timing_signal(5, 8)
        t, i = 3, 2
        assert sig[t, 2 * i] == pytest.approx(math.sin(t / 10000 ** (2 * i / 8)))
        assert sig[t, 2 * i + 1] == pytest.approx(math.cos(t / 10000 ** (2 * i / 8)))
        np.testing.assert_array_equal(sig[0, 1::2], 1.0)

    def test_odd_depth(self):
        with pytest.raises(ConfigurationError, match="even"):
            timing_signal(4, 5)

    def test_cached_signal_is_readonly(self):
        with pytest.raises(ValueError):
            timing_signal(3, 4)[0, 0] = 1.0

    def test_add_timing(self):
        x = Tensor(np.zeros((2, 3, 4)))
        np.testing.assert_array_equal(add_timing(x).data[1], timing_signal(3, 4))


class TestAttention:
    def test_single_source_position(self, nprng):
        src = nprng.normal(size=(1, 1, 4))
        tgt = nprng.normal(size=(1, 3, 4))
        out = attend(Tensor(src), Tensor(tgt)).data
        np.testing.assert_allclose(out, np.broadcast_to(src / 2.0, (1, 3, 4)))

    def test_scaling_placement(self, nprng):
        src = Tensor(nprng.normal(size=(1, 5, 4)))
        tgt = Tensor(nprng.normal(size=(1, 2, 4)))
        w = attention_weights(src, tgt).data
        np.testing.assert_allclose(attend(src, tgt).data, w @ src.data / 2.0, atol=1e-12)
        w_in = attention_weights(src, tgt, scale_inside=True).data
        np.testing.assert_allclose(attend(src, tgt, scale_inside=True).data, w_in @ src.data, atol=1e-12)
        assert not np.allclose(w, w_in)

    def test_mask_removes_padding(self, nprng):
        src = nprng.normal(size=(1, 5, 4))
        tgt = Tensor(nprng.normal(size=(1, 2, 4)))
        mask = np.array([[True, True, True, False, False]])
        a = attend(Tensor(src), tgt, mask).data
        b = attend(Tensor(src[:, :3]), tgt).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_depth_mismatch(self):
        with pytest.raises(DimensionError):
            attend(Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((1, 2, 6))))

    def test_attend_gradients(self, nprng):
        src = Tensor(nprng.normal(size=(2, 4, 3)), requires_grad=True)
        tgt = Tensor(nprng.normal(size=(2, 3, 3)), requires_grad=True)
        assert finite_difference_check(lambda t: probe_loss(attend(t, tgt)), src) < 1e-4
        assert finite_difference_check(lambda t: probe_loss(attend(src, t)), tgt) < 1e-4

    def attention_specs(self, c=4):
        return [ConvSpec(k=5, d=1, c_in=c, c_out=c, padding="causal"), ConvSpec(k=5, d=4, c_in=c, c_out=c, padding="causal")]

    def test_module_gradients(self, nprng):
        mod = AttentionModule(self.attention_specs(), Rng(2))
        src = Tensor(nprng.normal(size=(1, 4, 4)))
        tgt = Tensor(nprng.normal(size=(1, 5, 4)), requires_grad=True)
        params = [t for _, t in mod.named()]
        assert max_param_error(lambda t: mod(src, t), params, tgt) < 1e-4

    def test_module_kernels_distinct_unless_shared(self):
        mod = AttentionModule(self.attention_specs(), Rng(2))
        assert mod.steps[0].kernels.depthwise[0] is not mod.steps[1].kernels.depthwise[0]
        assert len(mod.named()) == 8
        shared = AttentionModule(self.attention_specs(), Rng(2), share_kernels=True)
        assert shared.steps[0].kernels.depthwise[0] is shared.steps[1].kernels.depthwise[0]
        assert len(shared.named()) == 4
        assert shared.steps[1].spec.d == 4

    def test_query_is_causal(self, nprng):
        mod = AttentionModule(self.attention_specs(), Rng(2))
        tgt = nprng.normal(size=(1, 6, 4))
        base = mod.query(Tensor(tgt)).data
        tgt[0, 4:] += 1.0
        np.testing.assert_array_equal(mod.query(Tensor(tgt)).data[0, :4], base[0, :4])
