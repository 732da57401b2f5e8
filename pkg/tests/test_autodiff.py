"""Tape mechanics and finite-difference gradient checks for every op."""

import numpy as np
import pytest

from rgbtreg.autodiff import (
    Graph,
    Tensor,
    apply_op,
    backward,
    concat,
    gelu,
    matmul,
    set_finite_checks,
    softmax,
    tabs,
    tmean,
    tsum,
)
from rgbtreg.errors import ContractError, NumericError
from rgbtreg.gradcheck import gradcheck
from rgbtreg.netops import avg_pool2d, conv2d, grid_sample, layer_norm, upsample2x


def test_backward_simple_quadratic(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    with Graph() as g:
        loss = tsum(x * x)
    backward(g, loss)
    np.testing.assert_allclose(x.grad, 2.0 * x.data, rtol=1e-12)


def test_backward_accumulates_across_calls(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    for _ in range(2):
        with Graph() as g:
            loss = tsum(x * 3.0)
        backward(g, loss)
    np.testing.assert_allclose(x.grad, 6.0, rtol=1e-12)


def test_backward_skips_dead_branches(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    with Graph() as g:
        _unused = x * 100.0
        loss = tsum(x)
    backward(g, loss)
    np.testing.assert_allclose(x.grad, 1.0)


def test_backward_requires_scalar_loss(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    with Graph() as g:
        y = x * 2.0
    with pytest.raises(ContractError):
        backward(g, y)


def test_backward_shared_input_used_twice(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    with Graph() as g:
        loss = tsum(x * x + x * 2.0)
    backward(g, loss)
    np.testing.assert_allclose(x.grad, 2.0 * x.data + 2.0, rtol=1e-12)


def test_no_recording_outside_graph(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    g = Graph()
    y = x * 2.0
    assert len(g) == 0
    assert y.grad is None


def test_finite_check_raises_and_can_be_disabled():
    bad = Tensor([np.inf, 1.0])
    with pytest.raises(NumericError):
        bad + 1.0
    previous = set_finite_checks(False)
    try:
        out = bad + 1.0
        assert np.isinf(out.data[0])
    finally:
        set_finite_checks(previous)


def test_gradcheck_of_sum_is_exact(rng):
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    ok, err = gradcheck(lambda: tsum(x), x)
    assert ok
    assert err < 1e-9


def test_gradcheck_detects_wrong_gradient(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)

    def doubled_with_broken_grad(t):
        return apply_op("broken_double", t.data * 2.0, (t,), lambda dy: (dy * 3.0,))

    ok, err = gradcheck(lambda: tsum(doubled_with_broken_grad(x)), x)
    assert not ok
    assert err > 0.1


@pytest.mark.parametrize(
    "name",
    [
        "add",
        "sub",
        "mul",
        "abs",
        "gelu",
        "softmax",
        "sum_axis",
        "mean",
        "reshape",
        "transpose",
        "concat",
        "matmul2",
        "matmul3",
    ],
)
def test_gradcheck_elementwise_and_shape_ops(rng, name):
    x = Tensor(rng.normal(size=(3, 4)) + 0.1, requires_grad=True)
    other = Tensor(rng.normal(size=(3, 4)))
    vec4 = Tensor(rng.normal(size=4))
    mat43 = Tensor(np.arange(12.0).reshape(4, 3))
    mat64 = Tensor(rng.normal(size=(6, 4)))
    w42 = Tensor(rng.normal(size=(4, 2)))
    w142 = Tensor(rng.normal(size=(1, 4, 2)))
    builders = {
        "add": lambda: tsum((x + other) * other),
        "sub": lambda: tsum((x - other) * other),
        "mul": lambda: tsum(x * other * x),
        "abs": lambda: tsum(tabs(x)),
        "gelu": lambda: tsum(gelu(x) * other),
        "softmax": lambda: tsum(softmax(x, axis=-1) * other),
        "sum_axis": lambda: tsum(tsum(x, axis=0) * vec4),
        "mean": lambda: tmean(x * other),
        "reshape": lambda: tsum(x.reshape(4, 3) * mat43),
        "transpose": lambda: tsum(x.transpose(1, 0) * mat43),
        "concat": lambda: tsum(concat([x, x * 2.0], axis=0) * mat64),
        "matmul2": lambda: tsum(matmul(x, w42)),
        "matmul3": lambda: tsum(matmul(x.reshape(1, 3, 4), w142)),
    }
    ok, err = gradcheck(builders[name], x)
    assert ok, f"{name} grad mismatch: {err}"


def test_gradcheck_broadcast_add(rng):
    bias = Tensor(rng.normal(size=4), requires_grad=True)
    base = Tensor(rng.normal(size=(3, 4)))
    weight = Tensor(rng.normal(size=(3, 4)))
    ok, err = gradcheck(lambda: tsum((base + bias) * weight), bias)
    assert ok, err


@pytest.mark.parametrize("stride,padding,groups", [(1, 1, 1), (2, 0, 1), (2, 3, 2), (1, 3, 4)])
def test_gradcheck_conv2d(rng, stride, padding, groups):
    x = Tensor(rng.normal(size=(4, 8, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 4 // groups, 3 if padding < 3 else 7, 3 if padding < 3 else 7)), requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)
    mask = Tensor(rng.normal(size=conv2d(x, w, b, stride=stride, padding=padding, groups=groups).shape))

    def loss_fn():
        return tsum(conv2d(x, w, b, stride=stride, padding=padding, groups=groups) * mask)

    for target in (x, w, b):
        ok, err = gradcheck(loss_fn, target)
        assert ok, f"conv2d grad wrt {target.shape}: {err}"


def test_gradcheck_depthwise_conv(rng):
    x = Tensor(rng.normal(size=(6, 7, 7)), requires_grad=True)
    w = Tensor(rng.normal(size=(6, 1, 7, 7)), requires_grad=True)

    def loss_fn():
        out = conv2d(x, w, stride=1, padding=3, groups=6)
        return tsum(out * out)

    for target in (x, w):
        ok, err = gradcheck(loss_fn, target)
        assert ok, err


def test_gradcheck_layer_norm(rng):
    x = Tensor(rng.normal(size=(5, 4, 3)), requires_grad=True)
    gamma = Tensor(rng.normal(size=5) + 1.0, requires_grad=True)
    beta = Tensor(rng.normal(size=5), requires_grad=True)
    mask = Tensor(rng.normal(size=(5, 4, 3)))

    def loss_fn():
        return tsum(layer_norm(x, gamma, beta, axis=0) * mask)

    for target in (x, gamma, beta):
        ok, err = gradcheck(loss_fn, target)
        assert ok, err


def test_gradcheck_avg_pool(rng):
    x = Tensor(rng.normal(size=(2, 7, 5)), requires_grad=True)
    mask = Tensor(rng.normal(size=(2, 3, 2)))
    ok, err = gradcheck(lambda: tsum(avg_pool2d(x, 3, 2) * mask), x)
    assert ok, err


def test_gradcheck_grid_sample_wrt_input(rng):
    x = Tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
    coords = Tensor(rng.uniform(0.3, 4.4, size=(2, 4, 4)))
    mask = Tensor(rng.normal(size=(2, 4, 4)))
    ok, err = gradcheck(lambda: tsum(grid_sample(x, coords) * mask), x)
    assert ok, err


def test_gradcheck_grid_sample_wrt_coords(rng):
    x = Tensor(rng.normal(size=(2, 6, 6)))
    coords = Tensor(rng.uniform(0.3, 4.4, size=(2, 4, 4)), requires_grad=True)
    mask = Tensor(rng.normal(size=(2, 4, 4)))
    ok, err = gradcheck(lambda: tsum(grid_sample(x, coords) * mask), coords)
    assert ok, err


def test_gradcheck_upsample(rng):
    x = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    mask = Tensor(rng.normal(size=(2, 8, 8)))
    ok, err = gradcheck(lambda: tsum(upsample2x(x) * mask), x)
    assert ok, err


def test_gradcheck_subset_sampling(rng):
    x = Tensor(rng.normal(size=(10, 10)), requires_grad=True)
    ok, err = gradcheck(lambda: tsum(gelu(x)), x, max_checks=20)
    assert ok, err
