import io
import math

import numpy as np
import pytest

from oracles import central_diff, cross_entropy_direct, rel_error
from tokd.errors import ConfigError, DataError, RegistryError, ShapeError, StateError
from tokd.nn import (Adam, BatchNorm, Conv2d, Flatten, GlobalAvgPool, Linear, ReLU, Sequential, Sigmoid, StepLr,
                     conv_bn_relu, cross_entropy, load_checkpoint, save_checkpoint, softmax)

SEEDS = range(5)


def grad_check(net: Sequential, x: np.ndarray, seed: int, mode: str = "train"):
    """Max relative error of analytic vs central-difference grads for params and input."""
    r = np.random.default_rng(seed + 100).standard_normal(net.forward(x, mode).shape)

    def loss():
        return float(np.sum(net.forward(x, mode) * r))

    net.forward(x, mode)
    dx, grads = net.backward(r)
    grads = {k: v.copy() for k, v in grads.items()}
    errs = {"input": rel_error(dx, central_diff(loss, x))}
    for name, p in net.parameters().items():
        errs[name] = rel_error(grads[name], central_diff(loss, p))
    return errs


def _smooth_input(rng, shape):
    # keep ReLU inputs away from the kink so central differences are valid
    x = rng.standard_normal(shape)
    return x + 0.1 * np.sign(x)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", ["conv", "conv_s2", "batch_norm", "relu", "sigmoid", "gap", "linear", "flatten"])
def test_layer_gradients(kind, seed):
    rng = np.random.default_rng(seed)
    shape = (3, 2, 5, 5)
    layers = {
        "conv": ([Conv2d(2, 3, 3, 1, 1, rng=rng)], shape),
        "conv_s2": ([Conv2d(2, 3, 3, 2, 1, rng=rng)], shape),
        "batch_norm": ([BatchNorm(2)], shape),
        "relu": ([ReLU()], shape),
        "sigmoid": ([Sigmoid()], shape),
        "gap": ([GlobalAvgPool()], shape),
        "linear": ([Linear(6, 4, rng=rng)], (5, 6)),
        "flatten": ([Flatten()], shape),
    }[kind]
    net = Sequential(layers[0], in_shape=layers[1][1:])
    if kind == "conv" or kind == "conv_s2":
        net.layers[0].params["bias"] = rng.standard_normal(3)
    if kind == "batch_norm":
        net.layers[0].params["gamma"] = rng.uniform(0.5, 1.5, 2)
        net.layers[0].params["beta"] = rng.standard_normal(2)
    x = _smooth_input(rng, layers[1])
    errs = grad_check(net, x, seed)
    assert max(errs.values()) < 1e-4, errs


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_bn_relu_stack_gradients(seed):
    rng = np.random.default_rng(seed)
    net = Sequential(conv_bn_relu(2, 3, rng) + conv_bn_relu(3, 3, rng, stride=2) + [GlobalAvgPool(),
                     Linear(3, 2, rng=rng)], in_shape=(2, 6, 6))
    x = rng.standard_normal((4, 2, 6, 6))
    errs = grad_check(net, x, seed)
    assert max(errs.values()) < 1e-4, errs


@pytest.mark.parametrize("seed", SEEDS)
def test_batch_norm_frozen_backward(seed):
    # with statistics held at the batch values, BN is affine per channel
    rng = np.random.default_rng(seed)
    bn = BatchNorm(3)
    bn.params["gamma"] = rng.uniform(0.5, 2.0, 3)
    x = rng.standard_normal((4, 3, 2, 2))
    net = Sequential([bn], in_shape=(3, 2, 2))
    net.forward(x, "train")
    errs = grad_check(net, x, seed, mode="frozen")
    assert max(errs.values()) < 1e-4, errs


def test_empty_network_is_identity():
    x = np.random.default_rng(0).standard_normal((2, 3))
    assert np.array_equal(Sequential([]).forward(x), x)


def test_relu_example_and_flat_gradient():
    net = Sequential([ReLU()])
    assert np.array_equal(net.forward(np.array([[-1.0, 2.0]])), np.array([[0.0, 2.0]]))
    dx, _ = net.backward(np.array([[5.0, 5.0]]))
    assert np.array_equal(dx, np.array([[0.0, 5.0]]))


def test_two_layer_linear_matches_matmul():
    rng = np.random.default_rng(1)
    l1, l2 = Linear(4, 3, rng=rng), Linear(3, 2, rng=rng)
    l1.params["bias"] = rng.standard_normal(3)
    net = Sequential([l1, l2], in_shape=(4,))
    x = rng.standard_normal((5, 4))
    expect = (x @ l1.params["weight"].T + l1.params["bias"]) @ l2.params["weight"].T + l2.params["bias"]
    assert np.max(np.abs(net.forward(x) - expect)) < 1e-12


def test_linear_closed_form_gradient():
    rng = np.random.default_rng(2)
    lin = Linear(3, 2, rng=rng)
    x, g = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    net = Sequential([lin])
    net.forward(x)
    _, grads = net.backward(g)
    assert np.allclose(grads["0.weight"], sum(np.outer(g[i], x[i]) for i in range(4)), atol=1e-14)


def test_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(3)
    net = Sequential(conv_bn_relu(2, 2, rng), in_shape=(2, 4, 4))
    net.forward(rng.standard_normal((2, 2, 4, 4)))
    _, grads = net.backward(np.zeros((2, 2, 4, 4)))
    assert all(not np.any(g) for g in grads.values())


def test_backward_without_forward_is_state_error():
    net = Sequential([ReLU()])
    with pytest.raises(StateError):
        net.backward(np.ones((1, 1)))
    net.forward(np.ones((1, 1)), "infer")
    with pytest.raises(StateError):
        net.backward(np.ones((1, 1)))


def test_construction_shape_error_is_layer_indexed():
    with pytest.raises(ShapeError, match="layer 1"):
        Sequential([Conv2d(3, 4), Conv2d(5, 2)], in_shape=(3, 8, 8))
    net = Sequential([Conv2d(3, 4)], in_shape=(3, 8, 8))
    with pytest.raises(ShapeError, match="layer 0"):
        net.forward(np.zeros((1, 2, 8, 8)))


def test_batch_norm_modes():
    rng = np.random.default_rng(4)
    bn = BatchNorm(2)
    x = rng.standard_normal((8, 2, 3, 3)) * 3 + 1
    y = bn.forward(x, "train")
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    assert np.allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)
    assert np.allclose(bn.buffers["running_mean"], 0.1 * x.mean(axis=(0, 2, 3)))
    # inference is a fixed affine map of the input
    a, b = bn.forward(x[:1], "infer"), bn.forward(2 * x[:1], "infer")
    c = bn.forward(np.zeros_like(x[:1]), "infer")
    assert np.allclose(b - c, 2 * (a - c), atol=1e-12)
    with pytest.raises(ConfigError):
        bn.forward(x, "bogus")


def test_sigmoid_range_and_saturation():
    y = Sequential([Sigmoid()]).forward(np.array([[-800.0, 0.0, 800.0]]))
    assert y[0, 0] >= 0 and y[0, 1] == 0.5 and y[0, 2] <= 1
    assert np.all(np.isfinite(y))


def test_cross_entropy_examples():
    loss, _ = cross_entropy(np.array([[0.0, 0.0]]), np.array([0]))
    assert abs(loss - math.log(2)) < 1e-15
    loss, grad = cross_entropy(np.array([[1000.0, -1000.0]]), np.array([0]))
    assert 0 <= loss < 1e-12 and np.all(np.isfinite(grad))


def test_cross_entropy_matches_direct_formula_and_gradient():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((16, 2)) * 3
    labels = rng.integers(0, 2, 16)
    loss, grad = cross_entropy(logits, labels)
    assert abs(loss - cross_entropy_direct(logits.tolist(), labels.tolist())) < 1e-10
    onehot = np.eye(2)[labels]
    assert np.allclose(grad, (softmax(logits) - onehot) / 16, atol=1e-15)
    fd = central_diff(lambda: cross_entropy(logits, labels)[0], logits)
    assert rel_error(grad, fd) < 1e-4


def test_cross_entropy_label_errors():
    with pytest.raises(DataError):
        cross_entropy(np.zeros((2, 2)), np.array([0, 2]))
    with pytest.raises(DataError):
        cross_entropy(np.zeros((2, 2)), np.array([0, -1]))


def test_step_lr_values():
    s = StepLr(1e-4, 5, 0.1)
    assert s(0) == 1e-4 and s(4) == 1e-4
    assert abs(s(5) - 1e-5) < 1e-20 and abs(s(14) - 1e-6) < 1e-20
    with pytest.raises(ConfigError):
        StepLr(1e-3, 0, 0.1)


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    Adam(p, lr=0.1).step({"w": np.zeros(2)})
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([3.0])}
    Adam(p, lr=1e-3).step({"w": np.array([1.0])})
    assert abs(p["w"][0] - (3.0 - 1e-3)) < 1e-10


def test_adam_matches_hand_unrolled_quadratic():
    # f(w) = (w - 2)^2, three steps
    p = {"w": np.array([0.5])}
    opt = Adam(p, lr=0.1)
    w, m, v = 0.5, 0.0, 0.0
    for t in range(1, 4):
        g = 2 * (p["w"][0] - 2)
        opt.step({"w": np.array([g])})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(p["w"][0] - w) < 1e-12


def test_adam_missing_gradient():
    with pytest.raises(RegistryError):
        Adam({"a": np.zeros(1), "b": np.zeros(1)}).step({"a": np.zeros(1)})


def test_checkpoint_round_trip_and_layout(tmp_path):
    rng = np.random.default_rng(6)
    net = Sequential(conv_bn_relu(2, 3, rng), in_shape=(2, 4, 4))
    net.forward(rng.standard_normal((2, 2, 4, 4)))
    save_checkpoint(tmp_path / "c.ckpt", net.state_dict(), {"note": "x"})
    raw = (tmp_path / "c.ckpt").read_bytes()
    assert raw[:8] == b"TOKDCKPT" and int.from_bytes(raw[8:12], "little") == 1
    state, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"note": "x"}
    other = Sequential(conv_bn_relu(2, 3, np.random.default_rng(99)), in_shape=(2, 4, 4))
    other.load_state_dict(state)
    x = rng.standard_normal((3, 2, 4, 4))
    assert np.array_equal(other.forward(x, "infer"), net.forward(x, "infer"))
    buf = io.BytesIO()
    save_checkpoint(buf, net.state_dict(), {"note": "x"})
    assert buf.getvalue() == raw


def test_checkpoint_errors(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(b"not a checkpoint")
    net = Sequential([Linear(2, 2)], in_shape=(2,))
    with pytest.raises(RegistryError):
        net.load_state_dict({})
