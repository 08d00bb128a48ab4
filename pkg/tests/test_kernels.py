import numpy as np
import pytest

from deltalearn._kernels import conv_cy, conv_np

from oracles import conv2d_loops, random_conv_case as random_case

BACKENDS = [pytest.param(conv_np, id="numpy")]
if conv_cy is not None:
    BACKENDS.append(pytest.param(conv_cy, id="cython"))


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


def test_forward_matches_loop_oracle_on_random_shapes(backend):
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 50:
        case = random_case(rng)
        if case is None:
            continue
        x, w, b, stride, pad = case
        got = backend.conv2d_forward(x, w, b, stride, pad)
        ref = conv2d_loops(x, w, b, stride, pad)
        assert np.abs(got - ref).max() <= 1e-12
        checked += 1


def test_backends_agree_bitwise_on_forward():
    if conv_cy is None:
        pytest.skip("compiled backend unavailable")
    rng = np.random.default_rng(3)
    for _ in range(10):
        case = random_case(rng)
        if case is None:
            continue
        x, w, b, stride, pad = case
        a = conv_np.conv2d_forward(x, w, b, stride, pad)
        c = conv_cy.conv2d_forward(x, w, b, stride, pad)
        assert a.tobytes() == c.tobytes()


def test_backward_input_is_forward_transpose(backend):
    # <dout, conv(x)> must equal <dL/dx, x> for the linear (bias-free) map.
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = np.zeros(4)
    out = backend.conv2d_forward(x, w, b, 1, 1)
    dout = rng.standard_normal(out.shape)
    gx = backend.conv2d_backward_input(dout, w, x.shape, 1, 1)
    lhs = float((dout * out).sum())
    rhs = float((gx * x).sum())
    assert abs(lhs - rhs) < 1e-9


def test_backward_weight_matches_directional_derivative(backend):
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    dout = rng.standard_normal(backend.conv2d_forward(x, w, b, 2, 1).shape)
    gw = backend.conv2d_backward_weight(dout, x, w.shape, 2, 1)
    direction = rng.standard_normal(w.shape)
    eps = 1e-6
    f = lambda wv: float((dout * backend.conv2d_forward(x, wv, b, 2, 1)).sum())
    numeric = (f(w + eps * direction) - f(w - eps * direction)) / (2 * eps)
    assert abs(numeric - float((gw * direction).sum())) < 1e-6


def test_backward_agrees_across_backends():
    if conv_cy is None:
        pytest.skip("compiled backend unavailable")
    rng = np.random.default_rng(17)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((5, 3, 3, 3))
    dout = rng.standard_normal((2, 5, 8, 8))
    gi_np = conv_np.conv2d_backward_input(dout, w, x.shape, 1, 1)
    gi_cy = conv_cy.conv2d_backward_input(dout, w, x.shape, 1, 1)
    gw_np = conv_np.conv2d_backward_weight(dout, x, w.shape, 1, 1)
    gw_cy = conv_cy.conv2d_backward_weight(dout, x, w.shape, 1, 1)
    assert np.abs(gi_np - gi_cy).max() < 1e-12
    assert np.abs(gw_np - gw_cy).max() < 1e-12
