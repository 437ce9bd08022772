import math

import numpy as np
import pytest
import torch

from conftest import balanced_batch
from config import Config
from core import backbone
from core.backbone import (
    BackboneConfig,
    BackboneConfigError,
    LabeledBatch,
    LayoutMismatchError,
    ParameterLayout,
    ParameterVector,
    ShapeMismatchError,
    bce_loss,
)


def random_instance(seed):
    """20 通りの小さなバックボーン（float64, tanh, 200 パラメータ以下）"""
    rng = np.random.default_rng(seed)
    use_bn = bool(rng.integers(2))
    if seed % 4 == 3:
        config = BackboneConfig(input_kind='image', input_shape=(1, 4, 4), conv_channels=(2,), kernel_size=3,
                                pool_size=2, use_batchnorm=use_bn, activation='tanh', dtype='float64', seed=seed)
        batch = balanced_batch(3, None, seed, image_shape=(1, 4, 4))
    else:
        d = int(rng.integers(2, 6))
        widths = tuple(int(w) for w in rng.integers(2, 6, size=int(rng.integers(1, 3))))
        config = BackboneConfig(input_kind='vector', input_shape=(d,), conv_channels=widths, use_batchnorm=use_bn,
                                activation='tanh', dtype='float64', seed=seed)
        batch = balanced_batch(3, d, seed)
    params = backbone.init_params(config)
    # バイアスが0のままだと対称になりやすいので少しずらす
    jitter = torch.as_tensor(rng.normal(scale=0.1, size=len(params)))
    return config, params + params.with_values(jitter), batch


def numeric_grad(params, batch, h=1e-5):
    base = params.values
    grad = np.empty(len(params))
    for i in range(len(params)):
        step = torch.zeros_like(base)
        step[i] = h
        plus = backbone.loss(params.with_values(base + step), batch)
        minus = backbone.loss(params.with_values(base - step), batch)
        grad[i] = (plus - minus) / (2 * h)
    return grad


def reference_forward(config, params, inputs):
    """numpy のループで書いた畳み込みバックボーン"""
    named = {k: v.numpy() for k, v in params.named().items()}
    x = np.asarray(inputs, dtype=np.float64)
    k, p = config.kernel_size, config.pool_size
    pad = k // 2
    for i in range(1, len(config.conv_channels) + 1):
        weight, bias = named[f'conv{i}.weight'], named[f'conv{i}.bias']
        n, _, height, width = x.shape
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.zeros((n, weight.shape[0], height, width))
        for o in range(weight.shape[0]):
            for r in range(height):
                for s in range(width):
                    out[:, o, r, s] = np.sum(padded[:, :, r:r + k, s:s + k] * weight[o], axis=(1, 2, 3)) + bias[o]
        if config.use_batchnorm:
            mean = out.mean(axis=(0, 2, 3), keepdims=True)
            var = out.var(axis=(0, 2, 3), keepdims=True)
            out = (out - mean) / np.sqrt(var + Config.BATCHNORM_EPSILON)
            out = out * named[f'bn{i}.scale'][None, :, None, None] + named[f'bn{i}.shift'][None, :, None, None]
        out = np.maximum(out, 0.0)
        h2, w2 = height // p, width // p
        out = out[:, :, :h2 * p, :w2 * p].reshape(n, out.shape[1], h2, p, w2, p).max(axis=(3, 5))
        x = out
    logits = x.reshape(len(x), -1) @ named['fc.weight'].T + named['fc.bias']
    probs = 1.0 / (1.0 + np.exp(-logits[:, 0]))
    return np.clip(probs, Config.PROB_EPSILON, 1 - Config.PROB_EPSILON)


class TestBackboneConfig:
    def test_default_conv_parameter_count(self):
        # conv 1664+76848+38432+12816, batchnorm 128+96+64+32, fc 16*2*2+1
        layout = ParameterLayout.from_config(BackboneConfig())
        assert layout.size == 130145
        assert layout.names[:4] == ['conv1.weight', 'conv1.bias', 'bn1.scale', 'bn1.shift']
        assert layout.slot('fc.weight').shape == (1, 64)

    def test_spatial_collapse_names_stage(self):
        with pytest.raises(BackboneConfigError, match='stage 4'):
            BackboneConfig(input_shape=(1, 8, 8), conv_channels=(4, 4, 4, 4))

    @pytest.mark.parametrize('field, value', [
        ('kernel_size', 4),
        ('activation', 'sigmoid'),
        ('dtype', 'float16'),
        ('fc_output_dim', 2),
        ('input_kind', 'audio'),
    ])
    def test_invalid_fields(self, field, value):
        with pytest.raises(BackboneConfigError, match=field.split('_')[0]):
            BackboneConfig(**{field: value})

    def test_dict_round_trip(self):
        config = BackboneConfig(input_kind='vector', input_shape=(7,), conv_channels=(5, 3), dtype='float64')
        assert BackboneConfig.from_dict(config.to_dict()) == config

    def test_layout_checksum(self):
        a = ParameterLayout.from_config(BackboneConfig(seed=1))
        b = ParameterLayout.from_config(BackboneConfig(seed=2))
        c = ParameterLayout.from_config(BackboneConfig(conv_channels=(64, 48, 32, 8)))
        assert a.checksum() == b.checksum()
        assert a.checksum() != c.checksum()


class TestParameterVector:
    def test_arithmetic(self):
        layout = ParameterLayout.flat('w', 3)
        a = ParameterVector(torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64), layout)
        b = ParameterVector(torch.tensor([0.5, 0.5, 0.5], dtype=torch.float64), layout)
        assert (a + b).numpy().tolist() == [1.5, 2.5, 3.5]
        assert (a - 2 * b).numpy().tolist() == [0.0, 1.0, 2.0]
        assert (-a).numpy().tolist() == [-1.0, -2.0, -3.0]
        assert a.dot(b) == 3.0
        assert a.norm() == pytest.approx(math.sqrt(14))

    def test_layout_mismatch(self):
        a = ParameterVector(torch.zeros(3), ParameterLayout.flat('w', 3))
        b = ParameterVector(torch.zeros(3), ParameterLayout.flat('v', 3))
        with pytest.raises(LayoutMismatchError):
            a + b
        with pytest.raises(LayoutMismatchError):
            ParameterVector(torch.zeros(4), ParameterLayout.flat('w', 3))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match='non-finite'):
            ParameterVector(torch.tensor([0.0, float('nan')]), ParameterLayout.flat('w', 2))


class TestInitParams:
    def test_deterministic_per_seed(self):
        config = BackboneConfig(input_kind='vector', input_shape=(5,), conv_channels=(4,))
        assert backbone.init_params(config).equals(backbone.init_params(config))
        assert not backbone.init_params(config, seed=1).equals(backbone.init_params(config, seed=2))

    def test_bias_and_batchnorm_initialization(self):
        params = backbone.init_params(BackboneConfig(input_shape=(1, 16, 16), conv_channels=(8, 4)))
        named = params.named()
        assert torch.all(named['conv1.bias'] == 0)
        assert torch.all(named['bn2.scale'] == 1)
        assert torch.all(named['bn2.shift'] == 0)
        assert params.dtype == torch.float32

    def test_float64_matches_float32_draws(self):
        config = BackboneConfig(input_kind='vector', input_shape=(5,), conv_channels=(4,))
        single = backbone.init_params(config)
        double = backbone.init_params(config.with_dtype('float64'))
        assert torch.equal(double.values.to(torch.float32), single.values)


class TestForward:
    def test_matches_naive_convolution(self):
        config = BackboneConfig(input_shape=(2, 6, 6), conv_channels=(3, 2), kernel_size=3, pool_size=2,
                                dtype='float64', seed=5)
        params = backbone.init_params(config)
        params = params + params.with_values(torch.linspace(-0.2, 0.2, len(params), dtype=torch.float64))
        batch = balanced_batch(3, None, seed=1, image_shape=(2, 6, 6))
        probs = backbone.forward(params, batch)
        np.testing.assert_allclose(probs, reference_forward(config, params, batch.inputs), rtol=1e-9, atol=1e-12)

    def test_matches_naive_convolution_without_batchnorm(self):
        config = BackboneConfig(input_shape=(1, 5, 5), conv_channels=(2,), kernel_size=3, pool_size=2,
                                use_batchnorm=False, dtype='float64', seed=2)
        params = backbone.init_params(config)
        batch = balanced_batch(2, None, seed=4, image_shape=(1, 5, 5))
        np.testing.assert_allclose(backbone.forward(params, batch), reference_forward(config, params, batch.inputs),
                                   rtol=1e-9, atol=1e-12)

    def test_probabilities_are_clamped(self):
        config = BackboneConfig(input_kind='vector', input_shape=(3,), conv_channels=(2,), dtype='float64')
        params = backbone.init_params(config)
        values = params.values.clone()
        fc_bias = params.layout.slot('fc.bias')
        values[fc_bias.offset] = 100.0
        probs = backbone.forward(params.with_values(values), balanced_batch(2, 3))
        assert np.all(probs == 1 - Config.PROB_EPSILON)

    def test_zero_parameters_give_one_half(self):
        for config, batch in (
            (BackboneConfig(input_shape=(1, 8, 8), conv_channels=(2, 2), seed=1),
             balanced_batch(3, None, seed=2, image_shape=(1, 8, 8))),
            (BackboneConfig(input_kind='vector', input_shape=(3,), conv_channels=(4, 2)), balanced_batch(3, 3)),
        ):
            probs = backbone.forward(backbone.init_params(config).zeros_like(), batch)
            np.testing.assert_array_equal(probs, np.full(6, 0.5))

    @pytest.mark.parametrize('seed', range(5))
    def test_outputs_strictly_inside_unit_interval(self, seed):
        config = BackboneConfig(input_kind='vector', input_shape=(3,), conv_channels=(4,), dtype='float64')
        params = backbone.init_params(config)
        rng = np.random.default_rng(seed)
        params = params.with_values(torch.as_tensor(rng.normal(scale=5.0, size=len(params))))
        probs = backbone.forward(params, balanced_batch(4, 3, seed=seed))
        assert np.all((probs > 0.0) & (probs < 1.0))

    def test_batch_statistics_in_both_modes(self):
        config = BackboneConfig(input_kind='vector', input_shape=(3,), conv_channels=(4,), dtype='float64')
        params = backbone.init_params(config)
        batch = balanced_batch(3, 3, seed=0)
        np.testing.assert_array_equal(backbone.forward(params, batch, 'train'), backbone.forward(params, batch, 'eval'))

        # 同じ例でもバッチの構成が変われば出力が変わる
        other = LabeledBatch(np.concatenate([batch.inputs[:2], 10 + batch.inputs[2:]]), batch.labels)
        assert backbone.forward(params, other)[0] != backbone.forward(params, batch)[0]

    def test_shape_mismatch(self):
        params = backbone.init_params(BackboneConfig(input_kind='vector', input_shape=(3,), conv_channels=(2,)))
        with pytest.raises(ShapeMismatchError, match=r'\(3,\).*\(4,\)'):
            backbone.forward(params, balanced_batch(2, 4))

    def test_invalid_mode(self):
        params = backbone.init_params(BackboneConfig(input_kind='vector', input_shape=(3,), conv_channels=(2,)))
        with pytest.raises(ValueError, match='mode'):
            backbone.forward(params, balanced_batch(2, 3), mode='infer')


class TestLoss:
    def test_bce_at_one_half(self):
        assert bce_loss([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2))

    def test_bce_clamps_extremes(self):
        assert bce_loss([0.0], [1]) == pytest.approx(-math.log(Config.PROB_EPSILON))
        assert bce_loss([1.0], [1]) == pytest.approx(-math.log(1 - Config.PROB_EPSILON))

    def test_bce_worked_value(self):
        assert bce_loss([0.8], [1]) == pytest.approx(0.223144, abs=1e-6)

    def test_bce_monotone_in_probability(self):
        grid = np.linspace(0.01, 0.99, 50)
        positive = [bce_loss([p], [1]) for p in grid]
        negative = [bce_loss([p], [0]) for p in grid]
        assert np.all(np.diff(positive) < 0)
        assert np.all(np.diff(negative) > 0)

    def test_backbone_loss_matches_numpy_bce(self, tiny_vector_config):
        params = backbone.init_params(tiny_vector_config)
        batch = balanced_batch(3, 4, seed=2)
        assert backbone.loss(params, batch) == pytest.approx(bce_loss(backbone.forward(params, batch), batch.labels))


class TestDerivatives:
    @pytest.mark.parametrize('seed', range(20))
    def test_gradient_matches_finite_differences(self, seed):
        _, params, batch = random_instance(seed)
        assert len(params) <= 200
        grad = backbone.loss_grad(params, batch).numpy()
        fd = numeric_grad(params, batch)
        tolerance = 1e-4 * np.maximum(np.abs(grad), np.abs(fd)) + 1e-8
        assert np.all(np.abs(grad - fd) <= tolerance)

    @pytest.mark.parametrize('seed', range(10))
    def test_hessian_vector_product_matches_gradient_differences(self, seed):
        _, params, batch = random_instance(seed)
        rng = np.random.default_rng(100 + seed)
        v = params.with_values(torch.as_tensor(rng.normal(size=len(params))))
        h = 1e-4
        hv = backbone.hessian_vector_product(params, batch, v).numpy()
        fd = (backbone.loss_grad(params + h * v, batch) - backbone.loss_grad(params - h * v, batch)).numpy() / (2 * h)
        assert np.linalg.norm(hv - fd) <= 1e-3 * np.linalg.norm(fd) + 1e-8

    def test_hessian_vector_product_symmetric(self):
        _, params, batch = random_instance(1)
        rng = np.random.default_rng(3)
        u = params.with_values(torch.as_tensor(rng.normal(size=len(params))))
        v = params.with_values(torch.as_tensor(rng.normal(size=len(params))))
        vhu = v.dot(backbone.hessian_vector_product(params, batch, u))
        uhv = u.dot(backbone.hessian_vector_product(params, batch, v))
        assert abs(vhu - uhv) <= 1e-8

    def test_hessian_vector_product_linear(self):
        _, params, batch = random_instance(2)
        v = params.with_values(torch.as_tensor(np.random.default_rng(4).normal(size=len(params))))
        scaled = backbone.hessian_vector_product(params, batch, 2.5 * v)
        np.testing.assert_allclose(scaled.numpy(), 2.5 * backbone.hessian_vector_product(params, batch, v).numpy(),
                                   rtol=1e-10, atol=1e-12)

    def test_hessian_vector_product_of_zero(self):
        _, params, batch = random_instance(5)
        hv = backbone.hessian_vector_product(params, batch, params.zeros_like())
        np.testing.assert_array_equal(hv.numpy(), np.zeros(len(params)))

    def test_single_fc_layer_closed_form(self):
        config = BackboneConfig(input_kind='vector', input_shape=(3,), conv_channels=(), dtype='float64')
        params = backbone.init_params(config)
        w, b = np.array([0.4, -0.3, 0.2]), -0.1
        values = params.values.clone()
        weight, bias = params.layout.slot('fc.weight'), params.layout.slot('fc.bias')
        values[weight.offset:weight.offset + weight.length] = torch.as_tensor(w)
        values[bias.offset] = b
        params = params.with_values(values)

        batch = balanced_batch(3, 3, seed=6)
        x = np.asarray(batch.inputs, dtype=np.float64)
        y = np.asarray(batch.labels, dtype=np.float64)
        p = 1.0 / (1.0 + np.exp(-(x @ w + b)))
        np.testing.assert_allclose(backbone.forward(params, batch), p, rtol=1e-6)

        named = backbone.loss_grad(params, batch).named()
        np.testing.assert_allclose(named['fc.weight'].numpy().reshape(-1), ((p - y)[:, None] * x).mean(axis=0),
                                   rtol=1e-5, atol=1e-9)
        np.testing.assert_allclose(float(named['fc.bias'][0]), (p - y).mean(), rtol=1e-5, atol=1e-9)

    def test_relu_convolution_directional_derivative(self):
        config = BackboneConfig(input_shape=(1, 8, 8), conv_channels=(3, 2), kernel_size=3, dtype='float64', seed=11)
        params = backbone.init_params(config)
        batch = balanced_batch(4, None, seed=7, image_shape=(1, 8, 8))
        v = params.with_values(torch.as_tensor(np.random.default_rng(7).normal(size=len(params))))
        v = v * (1.0 / v.norm())
        h = 1e-6
        fd = (backbone.loss(params + h * v, batch) - backbone.loss(params - h * v, batch)) / (2 * h)
        assert backbone.loss_grad(params, batch).dot(v) == pytest.approx(fd, rel=1e-4, abs=1e-7)

    def test_value_and_grad_consistent(self, tiny_vector_config):
        params = backbone.init_params(tiny_vector_config)
        batch = balanced_batch(3, 4, seed=5)
        value, grad = backbone.value_and_grad(params, batch)
        assert value == pytest.approx(backbone.loss(params, batch), rel=1e-12)
        assert grad.equals(backbone.loss_grad(params, batch))
