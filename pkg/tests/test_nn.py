import math

import numpy as np
import pytest

from diamondseg.errors import ClassOutOfRange, DegenerateBatch, InvalidFactor, ShapeMismatch
from diamondseg.nn import (
    Adam, AdamState, BatchNorm2d, Conv2d, DepthwiseConv2d, GlobalAvgPool, ReLU, Sequential, Upsample, adam_step,
    bilinear_upsample, check_loss, check_module, conv2d_forward, cross_entropy_loss, depthwise_separable_conv,
    dumps_weights, focal_loss, global_avg_pool_forward, loads_weights, softmax_per_pixel,
)
from diamondseg.nn.functional import separable_param_count

SHAPES = [(1, 1, 5, 5), (2, 2, 6, 6), (1, 3, 7, 5), (2, 4, 8, 8), (1, 2, 8, 6)]


def direct_conv(x, w, b, pad):
    """Loop-based reference convolution, stride 1, dilation 1."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    y = np.zeros((n, o, h + 2 * pad - k + 1, wd + 2 * pad - k + 1))
    for i in range(y.shape[2]):
        for j in range(y.shape[3]):
            patch = xp[:, :, i:i + k, j:j + k]
            y[:, :, i, j] = np.einsum("ncuv,ocuv->no", patch, w) + b
    return y


def test_conv_identity_1x1(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    y, _ = conv2d_forward(x, w, np.zeros(3))
    assert np.array_equal(y, x)


def test_conv_matches_direct_oracle(rng):
    for shape in SHAPES:
        x = rng.standard_normal(shape)
        w = rng.standard_normal((3, shape[1], 3, 3))
        b = rng.standard_normal(3)
        y, _ = conv2d_forward(x, w, b)
        assert np.allclose(y, direct_conv(x, w, b, 1), rtol=0, atol=1e-12)


def test_dilated_impulse_footprint():
    x = np.zeros((1, 1, 11, 11))
    x[0, 0, 5, 5] = 1.0
    y, _ = conv2d_forward(x, np.ones((1, 1, 3, 3)), dilation=2)
    rows, cols = np.nonzero(y[0, 0])
    assert rows.max() - rows.min() + 1 == 5 and cols.max() - cols.min() + 1 == 5
    assert len(rows) == 9


def test_conv_shape_errors(rng):
    with pytest.raises(ShapeMismatch):
        conv2d_forward(rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 3, 3, 3)))


@pytest.mark.parametrize("dilation", [1, 2, 3, 4])
def test_conv_gradients(dilation):
    for i, shape in enumerate(SHAPES):
        layer = Conv2d(shape[1], 3, 3, dilation=dilation, rng=np.random.default_rng(i))
        report = check_module(layer, np.random.default_rng(10 + i).standard_normal(shape), seed=i)
        assert report.passed, report.errors
        assert set(report.errors) == {"input", "weight", "bias"}


def test_strided_conv_gradients(rng):
    layer = Conv2d(2, 3, 3, stride=2, rng=rng)
    assert check_module(layer, rng.standard_normal((2, 2, 8, 8))).passed


def test_depthwise_separable_reduction(rng):
    x = rng.standard_normal((1, 3, 6, 6))
    delta = np.zeros((3, 1, 3, 3))
    delta[:, 0, 1, 1] = 1.0
    pw = rng.standard_normal((4, 3, 1, 1))
    y = depthwise_separable_conv(x, delta, pw)
    assert np.allclose(y, conv2d_forward(x, pw)[0], atol=1e-12)
    for c in (2, 8, 32):
        assert separable_param_count(c, c, 3) == 9 * c + c * c < 9 * c * c


def test_depthwise_separable_gradients():
    for i, shape in enumerate(SHAPES):
        rng = np.random.default_rng(i)
        block = Sequential(DepthwiseConv2d(shape[1], 3, dilation=1 + i % 2, bias=True, rng=rng),
                           Conv2d(shape[1], 3, 1, rng=rng))
        assert check_module(block, rng.standard_normal(shape), seed=i).passed


def test_batchnorm_behaviour(rng):
    x = rng.standard_normal((4, 2, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    bn = BatchNorm2d(2, dtype=np.float64)
    assert np.allclose(bn(x, train=True), x, atol=1e-5)
    assert np.allclose(bn.running_mean, 0.0, atol=1e-12)
    bn.running_mean[:] = [1.0, -2.0]
    bn.running_var[:] = [4.0, 0.25]
    y1 = bn(x)
    assert np.array_equal(y1, bn(x))
    assert np.allclose(y1[:, 0], (x[:, 0] - 1.0) / math.sqrt(4.0 + 1e-5))
    with pytest.raises(DegenerateBatch):
        bn(np.ones((1, 2, 1, 1)), train=True)


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradients(train):
    for i, shape in enumerate(SHAPES):
        rng = np.random.default_rng(i)
        bn = BatchNorm2d(shape[1])
        bn.gamma.value[:] = rng.uniform(0.5, 1.5, shape[1])
        bn.beta.value[:] = rng.standard_normal(shape[1])
        assert check_module(bn, rng.standard_normal(shape) * 2 + 1, train=train, seed=i).passed


def test_relu_and_softmax(rng):
    x = rng.uniform(0.1, 2.0, (2, 3, 4, 4))
    r = ReLU()
    assert np.array_equal(r(x), x) and np.array_equal(r(-x), np.zeros_like(x))
    assert check_module(ReLU(), x * np.where(rng.random(x.shape) < 0.5, -1, 1)).passed
    p = softmax_per_pixel(rng.standard_normal((2, 4, 5, 5)) * 10)
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-6


def test_upsample(rng):
    for f in (2, 4, 8, 16):
        y, _ = bilinear_upsample(np.full((1, 2, 3, 3), 4.5), f)
        assert y.shape == (1, 2, 3 * f, 3 * f) and np.allclose(y, 4.5)
    ramp = np.tile(np.arange(8.0), (8, 1))[None, None]
    y, _ = bilinear_upsample(ramp, 2)
    expected = (np.arange(16) + 0.5) / 2 - 0.5
    assert np.allclose(y[0, 0, 5, 1:-1], expected[1:-1])
    with pytest.raises(InvalidFactor):
        bilinear_upsample(ramp, 3)
    for i, shape in enumerate(SHAPES):
        assert check_module(Upsample((2, 4)[i % 2]), rng.standard_normal(shape), seed=i).passed


def test_global_avg_pool(rng):
    y, _ = global_avg_pool_forward(np.array([[[[1.0, 2.0], [3.0, 6.0]]]]))
    assert y.shape == (1, 1, 1, 1) and y[0, 0, 0, 0] == 3.0
    assert np.allclose(global_avg_pool_forward(np.full((2, 3, 4, 4), 7.0))[0], 7.0)
    assert check_module(GlobalAvgPool(), rng.standard_normal((2, 3, 4, 4))).passed


def test_loss_values(rng):
    mask = rng.integers(0, 4, (2, 5, 5))
    loss, _ = cross_entropy_loss(np.zeros((2, 4, 5, 5)), mask)
    assert abs(loss - math.log(4)) < 1e-9
    strong = np.eye(4)[mask].transpose(0, 3, 1, 2) * 50.0
    assert cross_entropy_loss(strong, mask)[0] < 1e-12
    single = np.zeros((1, 4, 1, 1))
    single[0, 0] = math.log(3.0)  # p_0 = 3 / (3 + 3) = 0.5
    loss, _ = focal_loss(single, np.zeros((1, 1, 1), np.int64))
    assert abs(loss - 0.25 * math.log(2)) < 1e-12
    for _ in range(20):
        logits = rng.standard_normal((2, 4, 3, 3)) * 3
        m = rng.integers(0, 4, (2, 3, 3))
        ce, dce = cross_entropy_loss(logits, m)
        fl, dfl = focal_loss(logits, m, gamma=0.0)
        assert abs(ce - fl) < 1e-12 and np.allclose(dce, dfl, atol=1e-15)
        assert focal_loss(logits, m)[0] >= 0


def test_loss_errors(rng):
    with pytest.raises(ClassOutOfRange):
        cross_entropy_loss(np.zeros((1, 4, 2, 2)), np.full((1, 2, 2), 4))
    with pytest.raises(ShapeMismatch):
        focal_loss(np.zeros((1, 4, 2, 2)), np.zeros((1, 3, 2), np.int64))


def test_loss_gradients(rng):
    for i, shape in enumerate(SHAPES):
        logits = rng.standard_normal((shape[0], 4, shape[2], shape[3])) * 2
        mask = rng.integers(0, 4, (shape[0], shape[2], shape[3]))
        assert check_loss(cross_entropy_loss, logits, mask).passed
        assert check_loss(focal_loss, logits, mask).passed
        assert check_loss(focal_loss, logits, mask, gamma=1.5, alpha=[0.5, 1.0, 2.0, 1.0]).passed


def test_gradcheck_negative_control(rng):
    class Broken(Conv2d):
        def backward(self, dy):
            return super().backward(dy) * 1.01

    report = check_module(Broken(2, 2, 3, rng=rng), rng.standard_normal((1, 2, 5, 5)))
    assert not report.passed
    assert report.errors["input"] > 1e-4


def test_adam_steps():
    p = np.array([1.0, -2.0, 3.0])
    adam_step([p], [np.zeros(3)], AdamState(lr=1e-4))
    assert np.array_equal(p, [1.0, -2.0, 3.0])
    g = np.array([0.3, -5.0, 1e-3])
    q = p.copy()
    adam_step([q], [g], AdamState(lr=1e-4))
    assert np.allclose(q - p, -1e-4 * np.sign(g), rtol=1e-3)
    r = p.copy()
    adam_step([r], [g], AdamState(lr=1e-4))
    assert np.array_equal(q, r)
    with pytest.raises(ValueError):
        AdamState(lr=1e-2)


def test_adam_decreases_quadratic():
    layer = Conv2d(1, 1, 1, rng=np.random.default_rng(0), dtype=np.float64)
    opt = Adam(layer.parameters(), lr=3e-4)
    x = np.ones((1, 1, 2, 2))
    losses = []
    for _ in range(50):
        y = layer(x, train=True)
        losses.append(float((y ** 2).sum()))
        layer.zero_grad()
        layer.backward(2 * y)
        opt.step()
    assert losses[-1] < losses[0]


def test_weight_serialization(rng):
    state = {"a.weight": rng.standard_normal((3, 2, 3, 3)).astype(np.float32), "b": np.arange(4, dtype=np.float32)}
    blob = dumps_weights(state)
    assert blob[:4] == b"DSGW"
    back = loads_weights(blob)
    assert all(np.array_equal(back[k], state[k]) for k in state)
    with pytest.raises(ValueError):
        loads_weights(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        loads_weights(blob + b"\0")
