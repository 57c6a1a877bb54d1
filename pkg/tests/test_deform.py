import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dfam_detr import tensor as T
from dfam_detr.deform import (BilinearGather, DeformConv2d, bilinear_sample, deform_conv2d,
                              deform_conv2d_op, predict_offsets)
from dfam_detr.tensor import Tensor, grad_check

from oracles import bilinear, deform_conv2d_loops


def test_bilinear_examples():
    plane = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert bilinear_sample(plane, 0.5, 0.5) == 1.5
    assert bilinear_sample(plane, -5.0, -5.0) == 0.0
    grid = np.random.default_rng(0).standard_normal((4, 5))
    for i in range(4):
        for j in range(5):
            assert bilinear_sample(grid, float(i), float(j)) == grid[i, j]


@given(st.floats(-3, 8), st.floats(-3, 9), st.integers(0, 1000))
def test_gather_matches_corner_formula(y, x, seed):
    plane = np.random.default_rng(seed).standard_normal((5, 6))
    g = BilinearGather(np.array([y]), np.array([x]), 5, 6, np.array([0]), 1, 30)
    got = g.forward(plane.reshape(30, 1))[0, 0]
    assert abs(got - bilinear(plane, y, x)) < 1e-12
    assert abs(bilinear_sample(plane, y, x) - bilinear(plane, y, x)) < 1e-12


def test_zero_offset_predictor_gives_zero_field_of_expected_shape():
    layer = DeformConv2d(np.random.default_rng(0), 4, 6)
    off = predict_offsets(Tensor(np.random.default_rng(1).standard_normal((1, 4, 16, 16))), layer)
    assert off.shape == (1, 18, 16, 16)
    assert not off.data.any()


@pytest.mark.parametrize("seed", range(20))
def test_zero_offsets_reduce_to_standard_conv_float32(seed):
    r = np.random.default_rng(seed)
    with T.precision("float32"):
        stride = 1 + seed % 2
        layer = DeformConv2d(r, 3, 5, 3, stride, 1)
        layer.bias.data = r.standard_normal(5).astype(np.float32)
        x = Tensor(r.standard_normal((2, 3, 9, 10)).astype(np.float32))
        a = deform_conv2d(x, layer).data
        b = T.conv2d(x, layer.weight, layer.bias, stride, 1).data
        assert a.dtype == np.float32
        assert np.max(np.abs(a - b)) < 1e-6


def test_zero_offsets_float64_within_1e12(f64):
    r = np.random.default_rng(7)
    layer = DeformConv2d(r, 4, 4, 3, 1, 2, 2)
    x = Tensor(r.standard_normal((1, 4, 8, 8)))
    a = deform_conv2d(x, layer).data
    b = T.conv2d(x, layer.weight, layer.bias, 1, 2, 2).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_constant_offset_equals_shifted_conv(f64):
    r = np.random.default_rng(3)
    x = r.standard_normal((1, 1, 8, 8))
    w = r.standard_normal((1, 1, 3, 3))
    off = np.zeros((1, 18, 8, 8))
    off[:, 0::2] = 1.0  # dy = +1 on every tap
    out = deform_conv2d_op(Tensor(x), Tensor(off), Tensor(w), None, 1, 1).data
    # reading one row further down is the conv of the input shifted up by one row
    shifted = np.zeros_like(x)
    shifted[:, :, :-1] = x[:, :, 1:]
    ref = T.conv2d(Tensor(shifted), Tensor(w), None, 1, 1).data
    assert np.allclose(out[:, :, 1:-2, 1:-1], ref[:, :, 1:-2, 1:-1], atol=1e-12)


@pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 1), (1, 2)])
def test_matches_loop_oracle_with_fractional_offsets(f64, stride, dilation):
    r = np.random.default_rng(stride + 10 * dilation)
    x = r.standard_normal((2, 2, 6, 7))
    pad = dilation
    ho = (6 + 2 * pad - 2 * dilation - 1) // stride + 1
    wo = (7 + 2 * pad - 2 * dilation - 1) // stride + 1
    off = r.uniform(-2.5, 2.5, (2, 18, ho, wo))
    w = r.standard_normal((3, 2, 3, 3))
    b = r.standard_normal(3)
    got = deform_conv2d_op(Tensor(x), Tensor(off), Tensor(w), Tensor(b), stride, pad, dilation).data
    assert np.allclose(got, deform_conv2d_loops(x, off, w, b, stride, pad, dilation), atol=1e-12)


def test_far_out_of_bounds_samples_read_zero_with_zero_gradient(f64):
    x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    off = Tensor(np.full((1, 18, 4, 4), 50.0), requires_grad=True)
    out = deform_conv2d_op(x, off, Tensor(np.ones((1, 1, 3, 3))), None, 1, 1)
    assert not out.data.any()
    out.sum().backward()
    assert not x.grad.any() and not off.grad.any()


def test_output_is_continuous_in_offsets(f64):
    r = np.random.default_rng(5)
    x = r.standard_normal((1, 2, 6, 6))
    w = r.standard_normal((2, 2, 3, 3))
    off = r.uniform(-1, 1, (1, 18, 6, 6))
    base = deform_conv2d_op(Tensor(x), Tensor(off), Tensor(w), None, 1, 1).data
    bound = np.abs(w).sum() * np.abs(x).max()
    for delta in (1e-2, 1e-4, 1e-6):
        moved = deform_conv2d_op(Tensor(x), Tensor(off + delta), Tensor(w), None, 1, 1).data
        change = np.abs(moved - base).max()
        assert change <= 2 * delta * bound


@pytest.mark.parametrize("seed", range(5))
def test_gradients_input_weight_offset_predictor(f64, seed):
    r = np.random.default_rng(50 + seed)
    x = r.standard_normal((1, 2, 5, 5))
    off = r.uniform(-1.5, 1.5, (1, 18, 5, 5))
    w = r.standard_normal((2, 2, 3, 3))
    b = r.standard_normal(2)
    assert grad_check(lambda a, o, ww, bb: deform_conv2d_op(a, o, ww, bb, 1, 1), [x, off, w, b]) < 1e-4
    ow = r.normal(0, 0.3, (18, 2, 3, 3))
    ob = r.normal(0, 0.5, 18)

    def through_predictor(a, pw, pb):
        o = T.conv2d(a, pw, pb, 1, 1)
        return deform_conv2d_op(a, o, Tensor(w), None, 1, 1)

    assert grad_check(through_predictor, [x, ow, ob]) < 1e-4
