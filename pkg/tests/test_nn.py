"""Layer math: conv against a nested-loop oracle, batchnorm statistics,
analytic gradients against finite differences."""

import numpy as np
import pytest

from xmodal import nn


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def conv2d_oracle(x, kernels, bias, stride, pad):
    """Nested-loop cross-correlation with symmetric zero padding."""
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = kernels.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c_out, oh, ow), dtype=np.float64)
    for b in range(n):
        for o in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = (patch * kernels[o]).sum() + bias[o]
    return out


@pytest.mark.parametrize("stride,kh", [(1, 3), (2, 3), (1, 5), (2, 7)])
def test_conv2d_matches_nested_loop_oracle(rng, stride, kh):
    x = rng.standard_normal((2, 3, 11, 9)).astype(np.float32)
    layer = nn.ConvLayer(3, 4, kh, stride=stride, rng=rng)
    out = layer.forward(x, "eval")
    ref = conv2d_oracle(x.astype(np.float64), layer.p.kernels.astype(np.float64),
                        layer.p.bias.astype(np.float64), stride, kh // 2)
    assert out.shape == ref.shape
    np.testing.assert_allclose(out, ref, atol=1e-4)


def test_conv2d_rejects_even_kernels(rng):
    with pytest.raises(ValueError):
        nn.ConvLayer(3, 4, 4, stride=1, rng=rng)


def test_conv2d_is_linear_in_input(rng):
    layer = nn.ConvLayer(2, 3, 3, stride=1, rng=rng)
    layer.p.bias[...] = 0.0
    x1 = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)
    x2 = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)
    lhs = layer.forward(2.0 * x1 + 3.0 * x2, "eval")
    rhs = 2.0 * layer.forward(x1, "eval") + 3.0 * layer.forward(x2, "eval")
    np.testing.assert_allclose(lhs, rhs, atol=1e-4)


def test_stride2_shape_is_ceil_halving(rng):
    layer = nn.ConvLayer(1, 1, 3, stride=2, rng=rng)
    for h, w in ((7, 7), (8, 8), (9, 10)):
        out = layer.forward(np.zeros((1, 1, h, w), dtype=np.float32), "eval")
        assert out.shape[2:] == ((h + 1) // 2, (w + 1) // 2)


def test_batchnorm_train_mode_normalizes_batch(rng):
    layer = nn.BatchNormLayer(4)
    x = rng.standard_normal((8, 4, 5, 5)).astype(np.float32) * 3.0 + 2.0
    out = layer.forward(x, "train")
    mean = out.mean(axis=(0, 2, 3))
    var = out.var(axis=(0, 2, 3))
    np.testing.assert_allclose(mean, np.zeros(4), atol=1e-5)
    np.testing.assert_allclose(var, np.ones(4), atol=1e-3)


def test_batchnorm_eval_uses_running_stats(rng):
    layer = nn.BatchNormLayer(2)
    x = rng.standard_normal((16, 2, 4, 4)).astype(np.float32) * 2.0 + 1.0
    for _ in range(200):
        layer.forward(x, "train")
    out = layer.forward(x, "eval")
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), np.zeros(2), atol=1e-2)
    # eval mode must not depend on batch composition
    single = layer.forward(x[:1], "eval")
    np.testing.assert_allclose(single, out[:1], atol=1e-6)


def test_relu_subgradient_at_zero_is_zero(rng):
    layer = nn.ReLULayer()
    x = np.array([[-1.0, 0.0, 2.0]], dtype=np.float32)
    out = layer.forward(x, "train")
    np.testing.assert_array_equal(out, [[0.0, 0.0, 2.0]])
    grad = layer.backward(np.ones_like(x))
    np.testing.assert_array_equal(grad, [[0.0, 0.0, 1.0]])


def test_l2_normalize_locations_unit_norm(rng):
    x = rng.standard_normal((2, 16, 4, 5)).astype(np.float32) * 4.0
    out = nn.l2_normalize_locations(x)
    norms = np.sqrt((out.astype(np.float64) ** 2).sum(axis=1))
    np.testing.assert_allclose(norms, np.ones_like(norms), atol=1e-5)


def test_l2_normalize_scale_invariance(rng):
    x = rng.standard_normal((1, 8, 3, 3)).astype(np.float32) + 0.5
    np.testing.assert_allclose(nn.l2_normalize_locations(x),
                               nn.l2_normalize_locations(3.7 * x), atol=1e-5)


def test_grad_check_conv_only(rng):
    frag = nn.Sequential([nn.ConvLayer(3, 4, 3, stride=1, rng=rng)])
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    assert nn.grad_check(frag, x) <= 1e-6


def test_grad_check_conv_relu_bn_block(rng):
    frag = nn.Sequential([
        nn.ConvLayer(3, 4, 3, stride=2, rng=rng),
        nn.ReLULayer(),
        nn.BatchNormLayer(4),
    ])
    x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
    assert nn.grad_check(frag, x) <= 1e-3


def test_grad_check_two_blocks_with_linear_head(rng):
    frag = nn.Sequential([
        nn.ConvLayer(2, 4, 3, stride=2, rng=rng),
        nn.ReLULayer(),
        nn.BatchNormLayer(4),
        nn.ConvLayer(4, 6, 3, stride=1, rng=rng),
        nn.ReLULayer(),
        nn.BatchNormLayer(6),
    ])
    x = rng.standard_normal((2, 2, 10, 10)).astype(np.float32)
    assert nn.grad_check(frag, x) <= 1e-3


def test_grad_check_detects_broken_gradient(rng):
    """A deliberately corrupted backward pass must be rejected."""
    layer = nn.ConvLayer(2, 3, 3, stride=1, rng=rng)
    frag = nn.Sequential([layer])
    real_backward = layer.backward

    def corrupted(dy):
        dx = real_backward(dy)
        layer.gk *= 1.5
        return dx

    layer.backward = corrupted
    x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
    assert nn.grad_check(frag, x) > 1e-2


def test_conv_backward_matches_transpose_identity(rng):
    """<conv(x), u> == <x, conv_backward(u)> for bias-free linear conv."""
    layer = nn.ConvLayer(2, 3, 3, stride=1, rng=rng)
    layer.p.bias[...] = 0.0
    x = rng.standard_normal((1, 2, 7, 7)).astype(np.float32)
    y = layer.forward(x, "eval")
    u = rng.standard_normal(y.shape).astype(np.float32)
    layer.zero_grads()
    dx = layer.backward(u)
    lhs = float((y.astype(np.float64) * u).sum())
    rhs = float((x.astype(np.float64) * dx).sum())
    assert abs(lhs - rhs) <= 1e-3 * max(abs(lhs), 1.0)
