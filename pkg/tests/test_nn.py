import numpy as np
import pytest

from icstn.exceptions import ConfigurationError, DataFormatError
from icstn.nn import (
    Conv2D,
    Dense,
    LayerParams,
    MaxPool2x2,
    ReLU,
    Sequential,
    SgdConfig,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
    maxpool2x2_backward,
    maxpool2x2_forward,
    relu_backward,
    relu_forward,
    softmax,
    softmax_cross_entropy,
    sgd_step,
)


def conv_oracle(x, w, b):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    out = np.zeros((n, o, h - k + 1, wd - k + 1))
    for a in range(n):
        for f in range(o):
            for i in range(h - k + 1):
                for j in range(wd - k + 1):
                    out[a, f, i, j] = b[f] + np.sum(x[a, :, i : i + k, j : j + k] * w[f])
    return out


def probe_gradient(f, x, grad, rng, n_probes=100, h=1e-5):
    """Max relative error of ``grad`` against central differences of scalar ``f``."""
    worst = 0.0
    flat = x.reshape(-1)
    idx = rng.choice(flat.size, size=min(n_probes, flat.size), replace=False)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        num = (fp - fm) / (2 * h)
        ana = grad.reshape(-1)[i]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    return worst


# convolution
# -------------------------------------------------------------------------


def test_conv_sum_of_ones():
    p = LayerParams("conv", np.ones((1, 1, 3, 3)), np.zeros(1))
    assert conv2d_forward(np.ones((1, 1, 3, 3)), p).item() == 9.0


def test_conv_zero_kernel_gives_bias():
    rng = np.random.default_rng(0)
    p = LayerParams("conv", np.zeros((2, 3, 3, 3)), np.array([0.5, -1.5]))
    y = conv2d_forward(rng.random((2, 3, 6, 5)), p)
    assert np.all(y[:, 0] == 0.5) and np.all(y[:, 1] == -1.5)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        k = int(rng.integers(1, 4))
        h, w = rng.integers(k, 8, size=2)
        x = rng.normal(size=(n, c, h, w))
        p = LayerParams("conv", rng.normal(size=(o, c, k, k)), rng.normal(size=o))
        assert np.max(np.abs(conv2d_forward(x, p) - conv_oracle(x, p.weights, p.bias))) < 1e-12


def test_conv_channel_mismatch():
    p = LayerParams("conv", np.zeros((1, 2, 3, 3)), np.zeros(1))
    with pytest.raises(ConfigurationError):
        conv2d_forward(np.zeros((1, 3, 5, 5)), p)
    with pytest.raises(ConfigurationError):
        conv2d_forward(np.zeros((1, 2, 2, 2)), p)


def test_conv_backward_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 1, 4, 4))
    p = LayerParams("conv", rng.normal(size=(3, 1, 3, 3)), rng.normal(size=3))
    g = rng.normal(size=(1, 3, 2, 2))
    dx = conv2d_backward(g, x, p)

    def f():
        return np.sum(g * conv2d_forward(x, p))

    assert probe_gradient(f, x, dx, rng) < 1e-6
    assert probe_gradient(f, p.weights, p.grad_weights, rng) < 1e-6
    assert probe_gradient(f, p.bias, p.grad_bias, rng) < 1e-6


def test_conv_backward_zero_grad():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 2, 5, 5))
    p = LayerParams("conv", rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
    dx = conv2d_backward(np.zeros((2, 3, 3, 3)), x, p)
    assert not dx.any() and not p.grad_weights.any() and not p.grad_bias.any()


def test_conv_backward_single_pixel_places_kernel():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(1, 1, 3, 3))
    p = LayerParams("conv", w, np.zeros(1))
    g = np.zeros((1, 1, 3, 3))
    g[0, 0, 1, 2] = 1.0
    dx = conv2d_backward(g, rng.normal(size=(1, 1, 5, 5)), p)
    expected = np.zeros((5, 5))
    # output (1, 2) read the window with top-left (1, 2); flipping the kernel
    # twice (correlation then full convolution) leaves it in place
    expected[1:4, 2:5] = w[0, 0]
    assert np.allclose(dx[0, 0], expected, atol=1e-15)


def test_conv_gradients_accumulate():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 1, 4, 4))
    p = LayerParams("conv", rng.normal(size=(1, 1, 2, 2)), np.zeros(1))
    g = rng.normal(size=(1, 1, 3, 3))
    conv2d_backward(g, x, p)
    once = p.grad_weights.copy()
    conv2d_backward(g, x, p)
    assert np.allclose(p.grad_weights, 2 * once)


# fully connected
# -------------------------------------------------------------------------


def test_fc_identity():
    x = np.arange(12.0).reshape(3, 4)
    p = LayerParams("fc", np.eye(4), np.zeros(4))
    assert np.array_equal(fc_forward(x, p), x)


def test_fc_mismatch():
    p = LayerParams("fc", np.eye(4), np.zeros(4))
    with pytest.raises(ConfigurationError):
        fc_forward(np.zeros((2, 5)), p)


def test_fc_backward_finite_differences():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, 7))
    p = LayerParams("fc", rng.normal(size=(5, 7)), rng.normal(size=5))
    g = rng.normal(size=(3, 5))
    dx = fc_backward(g, x, p)

    def f():
        return np.sum(g * fc_forward(x, p))

    assert probe_gradient(f, x, dx, rng) < 1e-6
    assert probe_gradient(f, p.weights, p.grad_weights, rng) < 1e-6
    assert probe_gradient(f, p.bias, p.grad_bias, rng) < 1e-6


def test_dense_is_linear_regressor():
    # a dense layer on a flattened image is exactly dp = R I + b
    rng = np.random.default_rng(7)
    image = rng.random((1, 1, 5, 5))
    r = rng.normal(size=(6, 25))
    b = rng.normal(size=6)
    layer = Dense(25, 6)
    layer.params.weights[...] = r
    layer.params.bias[...] = b
    y, _ = layer.forward(image)
    assert np.array_equal(y[0], r @ image.reshape(-1) + b)


# pooling / activations / loss
# -------------------------------------------------------------------------


def test_maxpool_single_window():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    y, arg = maxpool2x2_forward(x)
    assert y.item() == 4.0
    dx = maxpool2x2_backward(np.ones((1, 1, 1, 1)), arg)
    assert np.array_equal(dx[0, 0], [[0, 0], [0, 1]])


def test_maxpool_ties_go_to_first():
    x = np.full((1, 2, 4, 4), 3.0)
    y, arg = maxpool2x2_forward(x)
    assert np.all(y == 3.0)
    dx = maxpool2x2_backward(np.ones_like(y), arg)
    assert np.array_equal(dx[0, 0], np.tile([[1, 0], [0, 0]], (2, 2)))


def test_maxpool_odd_extent():
    with pytest.raises(ConfigurationError):
        maxpool2x2_forward(np.zeros((1, 1, 3, 4)))


def test_maxpool_finite_differences():
    rng = np.random.default_rng(8)
    x = rng.permutation(64).reshape(1, 1, 8, 8).astype(float) * 0.1  # distinct values, no ties
    y, arg = maxpool2x2_forward(x)
    g = rng.normal(size=y.shape)
    dx = maxpool2x2_backward(g, arg)

    def f():
        return np.sum(g * maxpool2x2_forward(x)[0])

    assert probe_gradient(f, x, dx, rng) < 1e-6


def test_relu_finite_differences_off_kink():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4, 25))
    x[np.abs(x) < 1e-3] = 0.5
    g = rng.normal(size=x.shape)
    dx = relu_backward(g, x)

    def f():
        return np.sum(g * relu_forward(x))

    assert probe_gradient(f, x, dx, rng) < 1e-6


def test_uniform_logits_loss():
    loss, _ = softmax_cross_entropy(np.zeros((4, 10)), np.arange(4))
    assert abs(loss - np.log(10)) < 1e-15


def test_confident_logits_loss_vanishes():
    logits = np.zeros((1, 10))
    losses = []
    for margin in (1.0, 10.0, 50.0):
        logits[0, 3] = margin
        losses.append(softmax_cross_entropy(logits, np.array([3]))[0])
    assert losses[0] > losses[1] > losses[2] >= 0
    assert losses[2] < 1e-20


def test_cross_entropy_finite_differences():
    rng = np.random.default_rng(10)
    logits = rng.normal(size=(5, 10))
    labels = rng.integers(0, 10, 5)
    _, grad = softmax_cross_entropy(logits, labels)

    def f():
        return softmax_cross_entropy(logits, labels)[0]

    assert probe_gradient(f, logits, grad, rng) < 1e-6


def test_cross_entropy_bad_labels():
    with pytest.raises(DataFormatError):
        softmax_cross_entropy(np.zeros((2, 10)), np.array([0, 10]))
    with pytest.raises(DataFormatError):
        softmax_cross_entropy(np.zeros((2, 10)), np.array([0]))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(11)
    s = softmax(rng.normal(scale=20, size=(50, 10)))
    assert np.max(np.abs(s.sum(axis=1) - 1)) < 1e-12
    loss, _ = softmax_cross_entropy(rng.normal(size=(50, 10)), rng.integers(0, 10, 50))
    assert loss >= 0


# whole stacks
# -------------------------------------------------------------------------


def test_every_layer_passes_gradient_check():
    rng = np.random.default_rng(12)
    net = Sequential(
        [Conv2D(1, 3, 3, rng), ReLU(), MaxPool2x2(), Conv2D(3, 2, 2, rng), ReLU(), Dense(2 * 4 * 4, 5, rng)]
    )
    x = rng.normal(size=(2, 1, 12, 12))
    g = rng.normal(size=(2, 5))
    y, caches = net.forward(x)
    dx = net.backward(g, caches)

    def f():
        return np.sum(g * net(x))

    assert probe_gradient(f, x, dx, rng) < 1e-5
    for p in net.params:
        assert probe_gradient(f, p.weights, p.grad_weights, rng) < 1e-5
        assert probe_gradient(f, p.bias, p.grad_bias, rng) < 1e-5


def test_forward_deterministic():
    rng = np.random.default_rng(13)
    net = Sequential([Conv2D(1, 2, 3, rng), ReLU(), Dense(2 * 4 * 4, 3, rng)])
    x = rng.normal(size=(3, 1, 6, 6))
    assert np.array_equal(net(x), net(x))


def test_zero_initialized_layer():
    layer = Dense(10, 6, zero=True)
    y, _ = layer.forward(np.ones((2, 10)))
    assert not y.any()


# optimizer
# -------------------------------------------------------------------------


def test_sgd_scalar_step():
    p = LayerParams("fc", np.array([[1.0]]), np.zeros(1))
    p.grad_weights[...] = 2.0
    sgd_step({"default": [p]}, SgdConfig(0.01))
    assert p.weights.item() == 0.98
    assert not p.grad_weights.any()


def test_sgd_zero_gradient_is_noop():
    p = LayerParams("fc", np.array([[1.5, -2.0]]), np.array([0.25]))
    sgd_step({"default": [p]}, SgdConfig(0.1))
    assert np.array_equal(p.weights, [[1.5, -2.0]]) and p.bias.item() == 0.25


def test_sgd_groups_use_own_rates():
    a = LayerParams("fc", np.ones((1, 1)), np.zeros(1))
    b = LayerParams("fc", np.ones((1, 1)), np.zeros(1))
    a.grad_weights[...] = 1.0
    b.grad_weights[...] = 1.0
    sgd_step({"classifier": [a], "geometric": [b]}, SgdConfig({"classifier": 0.01, "geometric": 0.0001}))
    assert a.weights.item() == 1 - 0.01
    assert b.weights.item() == 1 - 0.0001


def test_sgd_shared_params_updated_once():
    p = LayerParams("fc", np.ones((1, 1)), np.zeros(1))
    p.grad_weights[...] = 1.0
    sgd_step({"default": [p, p]}, SgdConfig(0.5))
    assert p.weights.item() == 0.5


def test_sgd_config_validation():
    with pytest.raises(ConfigurationError):
        SgdConfig(0.0)
    with pytest.raises(ConfigurationError):
        SgdConfig(0.1, batch_size=0)
