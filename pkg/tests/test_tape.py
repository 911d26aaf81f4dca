import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canobody import rng, tape
from canobody.gradcheck import check_gradients
from canobody.tape import Tensor


def test_backward_quadratic_grad_is_identity():
    w = Tensor(np.array([1.5, -2.0, 0.25], dtype=np.float32), requires_grad=True)
    loss = tape.scale(tape.ssum(tape.mul(w, w)), 0.5)
    tape.backward(loss)
    np.testing.assert_array_equal(w.grad, w.data)


def test_backward_rejects_non_scalar():
    w = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        tape.backward(tape.mul(w, w))


def test_constant_loss_leaves_grads_empty():
    w = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    loss = tape.ssum(Tensor(np.zeros(3, dtype=np.float32)))
    tape.backward(loss)
    assert w.grad is None


def test_no_grad_suppresses_recording():
    w = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with tape.no_grad():
        out = tape.ssum(tape.mul(w, w))
    assert out._backward is None and not out.requires_grad


def test_bce_analytic_values():
    p = Tensor(np.array([0.5, 0.9], dtype=np.float64))
    out = tape.bce(p, np.array([1.0, 1.0]))
    assert out.data[0] == pytest.approx(math.log(2.0), rel=1e-6)
    assert out.data[1] == pytest.approx(-math.log(0.9), rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.0, 1.0))
def test_bce_symmetry(p, t):
    a = tape.bce(Tensor(np.array([p])), np.array([t])).data[0]
    b = tape.bce(Tensor(np.array([1.0 - p])), np.array([1.0 - t])).data[0]
    assert a == pytest.approx(b, abs=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=8))
def test_sigmoid_open_interval_softplus_nonneg(vals):
    x = Tensor(np.array(vals, dtype=np.float32))
    s = tape.sigmoid(x).data
    assert np.all((s > 0.0) & (s < 1.0))
    assert np.all(tape.softplus(x).data >= 0.0)


def test_trilinear_grid_node_and_constant():
    g = rng.stream(3, "trilinear")
    vol = g.normal(size=(4, 4, 4, 2)).astype(np.float32)
    node = np.array([[-1.0 + 2.0 * 2 / 3, -1.0, 1.0]])  # grid node (2,0,3)
    out = tape.trilinear(Tensor(vol), Tensor(node)).data
    np.testing.assert_allclose(out[0], vol[2, 0, 3], atol=1e-5)

    const = np.full((3, 3, 3, 1), 7.25, dtype=np.float32)
    pts = g.uniform(-1, 1, size=(10, 3))
    out = tape.trilinear(Tensor(const), Tensor(pts.astype(np.float32))).data
    np.testing.assert_allclose(out, 7.25, atol=1e-5)


def test_trilinear_center_of_eight_corners():
    vol = np.arange(8, dtype=np.float32).reshape(2, 2, 2, 1)
    out = tape.trilinear(Tensor(vol), Tensor(np.zeros((1, 3), dtype=np.float32))).data
    # hand evaluation: each corner weighted 1/8 -> (0+..+7)/8
    assert out[0, 0] == pytest.approx(3.5, abs=1e-6)


def test_trilinear_clamps_outside_box():
    vol = np.arange(8, dtype=np.float32).reshape(2, 2, 2, 1)
    inside = tape.trilinear(Tensor(vol), Tensor(np.array([[1.0, 1.0, 1.0]], np.float32)))
    outside = tape.trilinear(Tensor(vol), Tensor(np.array([[2.0, 3.0, 1.5]], np.float32)))
    assert inside.data[0, 0] == outside.data[0, 0] == pytest.approx(7.0, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(-0.95, 0.95), st.floats(-0.95, 0.95), st.floats(-0.95, 0.95))
def test_trilinear_continuity(x, y, z):
    g = rng.stream(9, "cont")
    vol = g.normal(size=(5, 5, 5, 1))
    p = np.array([[x, y, z]])
    q = p + 1e-6
    a = tape.trilinear_np(vol, p)
    b = tape.trilinear_np(vol, q)
    vrange = vol.max() - vol.min()
    assert abs(float(a[0, 0] - b[0, 0])) < 1e-4 * vrange


def test_gradcheck_on_composite_expression():
    g = rng.stream(4, "composite")

    def fn(a, b):
        h = tape.softplus(tape.matmul(a, b))
        return tape.mean(tape.mul(h, h))

    worst = check_gradients(fn, [g.normal(size=(3, 4)), g.normal(size=(4, 2))])
    assert worst < 1e-4


def test_reductions_accumulate_in_float64():
    # 1 + 1e-8 collapses in float32 sums but survives 64-bit accumulation
    x = np.full(10_000_000, 1e-8, dtype=np.float32)
    t = Tensor(x)
    exact = tape.ssum(t).item()
    assert exact == pytest.approx(0.1, rel=1e-4)
