import numpy as np
import pytest

from sipnet import blocks, ops
from sipnet.gradcheck import OPS_TOL, block_cases, check_tensors
from sipnet.tensor import ConfigError, ShapeError, Tensor, precision

with precision(np.float64):
    _CASES = block_cases()


@pytest.mark.parametrize("case", _CASES, ids=[c[0] for c in _CASES])
def test_block_gradients(case):
    _, fn, leaves = case
    with precision(np.float64):
        assert check_tensors(fn, leaves, h=1e-6, max_coords=20) < OPS_TOL


def test_am_with_zero_skip_halves_decoder():
    rng = np.random.default_rng(0)
    dec = Tensor(rng.standard_normal((1, 4, 2, 4, 4)).astype(np.float32))
    out = blocks.am_forward(dec, Tensor(np.zeros((1, 4, 2, 4, 4), np.float32)))
    np.testing.assert_array_equal(out.data, dec.data * np.float32(0.5))


def test_am_mask_strictly_inside_unit_interval():
    skip = Tensor(np.array([-1e6, -30, 0, 30, 1e6], np.float32).reshape(1, 5, 1, 1, 1))
    _, mask = blocks.am_forward(Tensor(np.ones((1, 5, 1, 1, 1), np.float32)), skip, return_mask=True)
    assert (mask.data > 0).all() and (mask.data < 1).all()


def test_am_shape_mismatch():
    with pytest.raises(ShapeError):
        blocks.am_forward(Tensor(np.ones((1, 2, 2, 2, 2))), Tensor(np.ones((1, 3, 2, 2, 2))))


def test_dense_block_channel_growth():
    rng = np.random.default_rng(0)
    layers = [blocks.DenseLayerParams.create(rng, 4 + 3 * i, 3, 4, 3) for i in range(4)]
    out = blocks.dense_block_forward(Tensor(np.ones((1, 4, 2, 2, 2), np.float32)), layers, "eval")
    assert out.shape == (1, 16, 2, 2, 2)


def test_dense_block_keeps_input_channels_verbatim():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 2, 2, 2)).astype(np.float32)
    layers = [blocks.DenseLayerParams.create(rng, 2 + i, 1, 2, 3) for i in range(2)]
    out = blocks.dense_block_forward(Tensor(x), layers, "eval")
    np.testing.assert_array_equal(out.data[:, :2], x)


def test_drb_residual_is_additive():
    rng = np.random.default_rng(2)
    p = blocks.DrbParams.create(rng, 3, 2, 2, 3, 5, 3, residual=True)
    x = Tensor(rng.standard_normal((1, 3, 2, 2, 2)).astype(np.float32))
    with_res = blocks.drb_forward(x, p, "eval").data
    dense = blocks.dense_block_forward(x, p.layers, "eval")
    expected = blocks.transition_forward(dense, p, "eval").data + p.residual(x).data
    np.testing.assert_allclose(with_res, expected, atol=1e-6)


def test_deconv_factorized_and_full_double_extent():
    rng = np.random.default_rng(3)
    x = Tensor(np.ones((1, 6, 2, 3, 3), np.float32))
    for factorized in (True, False):
        p = blocks.DeconvParams.create(rng, 6, 4, 3, factorized)
        assert blocks.deconv_forward(x, p).shape == (1, 4, 4, 6, 6)


def test_head_rejects_fractional_factor():
    with pytest.raises(ConfigError):
        blocks.SupervisionHeadParams.create(np.random.default_rng(0), 4, (1.5, 2, 2), 3)


def test_head_output_full_resolution_probability():
    rng = np.random.default_rng(4)
    p = blocks.SupervisionHeadParams.create(rng, 4, (4, 4, 4), 3)
    y = blocks.supervision_head_forward(Tensor(rng.standard_normal((1, 4, 2, 3, 2)).astype(np.float32)), p)
    assert y.shape == (1, 1, 8, 12, 8)
    assert (y.data > 0).all() and (y.data < 1).all()


def test_head_conv_commutes_with_nearest_upsampling():
    rng = np.random.default_rng(5)
    p = blocks.SupervisionHeadParams.create(rng, 3, (2, 2, 2), 3)
    x = Tensor(rng.standard_normal((1, 3, 2, 2, 2)))
    a = blocks.supervision_head_forward(x, p).data
    b = ops.sigmoid(p.conv(ops.upsample_nn(x, 2))).data
    np.testing.assert_allclose(a, b, atol=1e-6)
