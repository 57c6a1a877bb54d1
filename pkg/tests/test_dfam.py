import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dfam_detr import tensor as T
from dfam_detr.dfam import DFAM, ChannelAttention, SpatialAttention, channel_attention, dfam_forward, spatial_attention
from dfam_detr.gradcheck import module_check
from dfam_detr.tensor import Tensor


def randn(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


def zeroed(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)
    return module


def test_zero_spatial_attention_halves_input():
    x = randn(0, 2, 256, 16, 16)
    out = spatial_attention(Tensor(x), zeroed(SpatialAttention(np.random.default_rng(0))))
    assert out.shape == (2, 256, 16, 16)
    assert np.array_equal(out.data, 0.5 * x)


def test_zero_channel_attention_halves_input():
    x = randn(1, 2, 8, 5, 5)
    out = channel_attention(Tensor(x), zeroed(ChannelAttention(np.random.default_rng(0), 8, 4)))
    assert np.array_equal(out.data, 0.5 * x)


def test_single_position_pools_coincide():
    ca = ChannelAttention(np.random.default_rng(2), 8, 4)
    x = Tensor(randn(2, 3, 8, 1, 1))
    pooled = x.reshape(3, 8)
    expected = T.sigmoid(ca.shared(pooled) * 2.0).data.reshape(3, 8, 1, 1)
    assert np.allclose(ca.weights(x).data, expected, atol=1e-12)


@pytest.mark.parametrize("precision", ["float32", "float64"])
def test_all_zero_block_scales_by_exactly_a_quarter(precision):
    with T.precision(precision):
        block = DFAM(np.random.default_rng(0), 16, 4).zero_()
        x = Tensor(randn(3, 2, 16, 6, 6).astype(T.get_dtype()))
        assert np.array_equal(dfam_forward(x, block).data, 0.25 * x.data)


@given(st.integers(1, 3), st.sampled_from([4, 8, 16]), st.integers(1, 7), st.integers(1, 7), st.integers(0, 10 ** 6))
def test_shape_preserved_and_gates_strictly_shrink(b, c, h, w, seed):
    r = np.random.default_rng(seed)
    block = DFAM(r, c, 4)
    x = Tensor(r.standard_normal((b, c, h, w)) * 3)
    out = block(x).data
    assert out.shape == x.shape
    sw = block.spatial.weights(x).data
    cw = block.channel.weights(block.spatial(x)).data
    assert np.all((sw > 0) & (sw < 1)) and np.all((cw > 0) & (cw < 1))
    nz = x.data != 0
    assert np.all(np.abs(out[nz]) < np.abs(x.data[nz]))


def test_order_is_spatial_then_channel():
    r = np.random.default_rng(4)
    block = DFAM(r, 8, 4)
    x = Tensor(r.standard_normal((2, 8, 5, 5)))
    forward = block(x).data
    assert np.allclose(forward, block.channel(block.spatial(x)).data, atol=0)
    assert not np.allclose(forward, block.spatial(block.channel(x)).data)


@pytest.mark.parametrize("seed", range(5))
def test_block_gradients(f64, seed):
    r = np.random.default_rng(seed)
    block = DFAM(r, 8, 4)
    for p in block.parameters():
        p.data = p.data + r.normal(0, 0.2, p.shape)
    assert module_check(block, block, [r.standard_normal((2, 8, 4, 3))]) < 1e-4
