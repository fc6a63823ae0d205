import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cottondet import gradsuite
from cottondet import tensor as T
from cottondet.blocks import (
    C2PSA,
    Conv,
    GhostConv,
    GSConv,
    RepConvBlock,
    SEBlock,
    SpatialAttention,
    c2psa_forward,
    cbam_spatial_attention,
    channel_shuffle,
    ghost_conv,
    repconv_forward,
    repconv_merge,
    se_channel_attention,
)
from cottondet.tensor import ShapeError, Tensor

from oracles import conv2d_loops


def zero_params(module):
    for _, p in module.named_parameters():
        p.data[...] = 0


def random_block(rng, c_in, c_out, identity=None):
    b = RepConvBlock(c_in, c_out, identity=identity, rng=rng)
    for _, p in b.named_parameters():
        p.data[...] = rng.normal(0, 0.5, size=p.shape)
    return b


class TestRepConv:
    def test_no_1x1_no_identity_is_plain_conv(self):
        rng = np.random.default_rng(0)
        b = random_block(rng, 3, 3, identity=False)
        b.w1.data[...] = 0
        b.b1.data[...] = 0
        x = rng.normal(size=(1, 3, 5, 5))
        np.testing.assert_allclose(
            repconv_forward(b, Tensor(x, dtype=np.float64)).data,
            conv2d_loops(x, b.w3.data, b.b3.data, pad=1),
            atol=1e-5,
        )

    def test_identity_branch_alone_returns_input(self):
        b = RepConvBlock(4, 4, identity=True)
        zero_params(b)
        x = np.random.default_rng(1).normal(size=(2, 4, 3, 3)).astype(np.float32)
        np.testing.assert_array_equal(repconv_forward(b, Tensor(x)).data, x)

    def test_merge_without_1x1_equals_w3(self):
        b = random_block(np.random.default_rng(2), 3, 5, identity=False)
        b.w1.data[...] = 0
        kernel, _ = repconv_merge(b)
        np.testing.assert_array_equal(kernel, b.w3.data)

    def test_merge_embeds_1x1_at_center(self):
        b = RepConvBlock(1, 1, identity=False)
        zero_params(b)
        b.w1.data[...] = 0.7
        kernel, _ = repconv_merge(b)
        expected = np.zeros((1, 1, 3, 3), dtype=np.float32)
        expected[0, 0, 1, 1] = 0.7
        np.testing.assert_array_equal(kernel, expected)

    def test_merge_identity_adds_center_one_and_biases_sum(self):
        b = RepConvBlock(3, 3, identity=True)
        zero_params(b)
        b.b3.data[...] = [1, 2, 3]
        b.b1.data[...] = [10, 20, 30]
        b.b_identity.data[...] = [100, 200, 300]
        kernel, bias = repconv_merge(b)
        expected = np.zeros((3, 3, 3, 3))
        for c in range(3):
            expected[c, c, 1, 1] = 1
        np.testing.assert_array_equal(kernel, expected)
        np.testing.assert_array_equal(bias, [111, 222, 333])

    def test_merged_shape_equals_w3_shape(self):
        b = RepConvBlock(2, 6)
        kernel, bias = b.merge()
        assert kernel.shape == b.w3.shape and bias.shape == (6,)
        assert b.merged is not None

    def test_four_channel_block_twenty_inputs(self):
        rng = np.random.default_rng(3)
        b = random_block(rng, 4, 4)
        b.merge()
        for _ in range(20):
            x = Tensor(rng.normal(size=(1, 4, 6, 6)))
            diff = np.abs(repconv_forward(b, x, "train").data - repconv_forward(b, x, "merged").data).max()
            assert diff <= 1e-5

    def test_merged_before_merge_errors(self):
        with pytest.raises(RuntimeError):
            repconv_forward(RepConvBlock(2, 2), Tensor(np.zeros((1, 2, 3, 3))), "merged")

    def test_identity_with_channel_mismatch_errors(self):
        with pytest.raises(ShapeError):
            RepConvBlock(2, 3, identity=True)
        b = RepConvBlock(2, 3)
        b.identity_enabled = True
        with pytest.raises(ShapeError):
            repconv_merge(b)

    def test_identity_defaults_to_channel_match(self):
        assert RepConvBlock(3, 3).identity_enabled
        assert not RepConvBlock(3, 4).identity_enabled

    def test_wrong_input_channels(self):
        with pytest.raises(ShapeError):
            repconv_forward(RepConvBlock(2, 2), Tensor(np.zeros((1, 3, 3, 3))))

    def test_merged_state_is_not_a_parameter(self):
        b = RepConvBlock(2, 2)
        before = [n for n, _ in b.named_parameters()]
        b.merge()
        assert [n for n, _ in b.named_parameters()] == before


class TestSE:
    def test_zero_weights_halve(self):
        b = SEBlock(4, reduction=2)
        zero_params(b)
        x = np.random.default_rng(0).normal(size=(2, 4, 3, 3)).astype(np.float32)
        np.testing.assert_allclose(se_channel_attention(b, Tensor(x)).data, 0.5 * x)

    def test_zero_input(self):
        b = SEBlock(4, reduction=2, rng=np.random.default_rng(1))
        assert not se_channel_attention(b, Tensor(np.zeros((1, 4, 2, 2)))).data.any()

    def test_single_channel_hand_value(self):
        b = SEBlock(1, reduction=1)
        zero_params(b)
        b.fc1.weight.data[...] = 1
        b.fc2.weight.data[...] = 1
        out = se_channel_attention(b, Tensor(np.ones((1, 1, 2, 2)), dtype=np.float64))
        np.testing.assert_allclose(out.data, 1 / (1 + np.exp(-1.0)), atol=1e-7)
        assert out.data[0, 0, 0, 0] == pytest.approx(0.7311, abs=1e-4)

    @pytest.mark.parametrize("c,r,hidden", [(16, 16, 1), (32, 16, 2), (8, 16, 1), (64, 4, 16), (3, 2, 1)])
    def test_bottleneck_width(self, c, r, hidden):
        assert SEBlock(c, r).hidden == hidden


class TestSpatial:
    def test_zero_weights_halve(self):
        b = SpatialAttention(7)
        zero_params(b)
        x = np.random.default_rng(0).normal(size=(1, 3, 5, 5)).astype(np.float32)
        np.testing.assert_allclose(cbam_spatial_attention(b, Tensor(x)).data, 0.5 * x)

    def test_zero_input(self):
        b = SpatialAttention(3, rng=np.random.default_rng(1))
        b.conv.bias.data[...] = 0
        assert not cbam_spatial_attention(b, Tensor(np.zeros((1, 2, 4, 4)))).data.any()

    def test_one_channel_hand_value(self):
        a, c = 0.3, -1.2
        b = SpatialAttention(1)
        zero_params(b)
        b.conv.weight.data[...] = 1  # mask logit = mean + max
        out = cbam_spatial_attention(b, Tensor([[[[a, c]]]], dtype=np.float64)).data
        sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
        np.testing.assert_allclose(out[0, 0, 0], [a * sig(2 * a), c * sig(2 * c)], atol=1e-15)

    @pytest.mark.parametrize("k", [0, 2, 4])
    def test_even_kernel_rejected(self, k):
        with pytest.raises(ValueError):
            SpatialAttention(k)


class TestC2PSA:
    def _half_masks(self, channels):
        b = C2PSA(channels, reduction=2, spatial_kernel=3)
        zero_params(b)
        b.fuse.weight.data[:, :, 0, 0] = np.eye(channels)
        return b

    def test_half_masks_and_identity_fuse(self):
        b = self._half_masks(4)
        x = np.random.default_rng(0).normal(size=(1, 4, 3, 3))
        out = c2psa_forward(b, Tensor(x, dtype=np.float64)).data
        np.testing.assert_allclose(out, np.concatenate([x[:, :2], 1.25 * x[:, 2:]], axis=1), atol=1e-6)

    def test_zero_input(self):
        b = C2PSA(4, reduction=2, spatial_kernel=3, rng=np.random.default_rng(1))
        b.fuse.bias.data[...] = 0
        assert not c2psa_forward(b, Tensor(np.zeros((1, 4, 3, 3)))).data.any()

    def test_saturated_masks_double_attended_half(self):
        b = self._half_masks(4)
        b.se.fc2.bias.data[...] = 20
        b.spatial.conv.bias.data[...] = 20
        x = np.random.default_rng(2).normal(size=(1, 4, 3, 3))
        out = c2psa_forward(b, Tensor(x, dtype=np.float64)).data
        np.testing.assert_allclose(out[:, 2:], 2 * x[:, 2:], atol=1e-4)
        np.testing.assert_allclose(out[:, :2], x[:, :2], atol=1e-12)

    def test_random_eight_channel_shape_and_gradient(self):
        rng = np.random.default_rng(3)
        b = C2PSA(8, reduction=2, spatial_kernel=3, rng=rng)
        assert c2psa_forward(b, Tensor(rng.normal(size=(2, 8, 5, 5)))).shape == (2, 8, 5, 5)
        assert gradsuite.check_c2psa(rng, points=3) <= 1e-3

    def test_odd_channels_rejected(self):
        with pytest.raises(ShapeError):
            C2PSA(5)
        b = C2PSA(4, reduction=2)
        with pytest.raises(ShapeError):
            c2psa_forward(b, Tensor(np.zeros((1, 3, 2, 2))))


class TestGhost:
    def test_ratio_one_is_plain_1x1(self):
        rng = np.random.default_rng(0)
        g = GhostConv(3, 5, primary_ratio=1.0, rng=rng)
        assert g.cheap is None
        x = rng.normal(size=(1, 3, 4, 4))
        np.testing.assert_allclose(
            ghost_conv(g, Tensor(x, dtype=np.float64)).data,
            conv2d_loops(x, g.primary.weight.data, g.primary.bias.data),
            atol=1e-6,
        )

    def test_zero_input(self):
        g = GhostConv(4, 8, rng=np.random.default_rng(1))
        assert not ghost_conv(g, Tensor(np.zeros((1, 4, 3, 3)))).data.any()

    def test_fewer_parameters_than_plain_conv(self):
        c_in, c_out = 16, 8
        g = GhostConv(c_in, c_out, primary_ratio=0.5)
        plain = Conv(c_in, c_out, k=1)
        # primary 1x1 (16*4 + 4) plus depthwise 3x3 over 4 channels (4*9 + 4)
        assert g.num_parameters() == (c_in * 4 + 4) + (4 * 9 + 4)
        assert plain.num_parameters() == c_in * c_out + c_out
        assert g.num_parameters() < plain.num_parameters()

    @pytest.mark.parametrize("c_out,ratio,primary", [(8, 0.5, 4), (7, 0.5, 4), (5, 0.28, 2), (3, 1.0, 3)])
    def test_primary_channel_count(self, c_out, ratio, primary):
        g = GhostConv(2, c_out, primary_ratio=ratio)
        assert g.n_primary == primary
        assert ghost_conv(g, Tensor(np.ones((1, 2, 3, 3)))).shape == (1, c_out, 3, 3)

    def test_invalid_ratio(self):
        with pytest.raises(ValueError):
            GhostConv(2, 4, primary_ratio=0.0)


class TestGSConv:
    def test_shuffle_interleaves(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(1, 6, 1, 1))
        np.testing.assert_array_equal(channel_shuffle(x, 2).data.ravel(), [0, 3, 1, 4, 2, 5])

    @pytest.mark.parametrize("stride", [1, 2])
    def test_output_shape(self, stride):
        g = GSConv(3, 8, stride=stride)
        assert g(Tensor(np.ones((2, 3, 8, 8)))).shape == (2, 8, 8 // stride, 8 // stride)

    def test_odd_output_rejected(self):
        with pytest.raises(ShapeError):
            GSConv(3, 5)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 2), st.sampled_from([2, 4, 6]), st.integers(2, 6), st.integers(2, 6), st.integers(0, 10**6))
def test_masks_in_open_unit_interval_and_shapes_preserved(n, c, h, w, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(0, 2, size=(n, c, h, w)), dtype=np.float64)
    se = SEBlock(c, reduction=2, rng=rng)
    sp = SpatialAttention(3, rng=rng)
    for m in (se.mask(x).data, sp.mask(x).data):
        assert np.all((m > 0) & (m < 1))
    assert se(x).shape == x.shape
    assert sp(x).shape == x.shape
    assert C2PSA(c, reduction=2, spatial_kernel=3, rng=rng)(x).shape == x.shape


@pytest.mark.parametrize("check", ["conv2d", "se", "cbam_spatial", "c2psa"])
def test_block_gradients(check):
    assert gradsuite.CHECKS[check](np.random.default_rng(7), 4) <= 1e-3


def test_save_and_load_round_trip(tmp_path):
    a = C2PSA(4, reduction=2, spatial_kernel=3, rng=np.random.default_rng(0))
    a.save(tmp_path)
    b = C2PSA(4, reduction=2, spatial_kernel=3, rng=np.random.default_rng(1))
    b.load_parameters(tmp_path)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
    desc = (tmp_path / "descriptor.json").read_text()
    assert '"kind": "c2psa"' in desc and '"spatial_kernel": 3' in desc


def test_load_rejects_other_kind(tmp_path):
    SEBlock(4, 2).save(tmp_path)
    with pytest.raises(ValueError):
        SpatialAttention(3).load_parameters(tmp_path)


def test_merged_kernel_matches_float64_recomputation():
    rng = np.random.default_rng(11)
    b = random_block(rng, 3, 3)
    kernel, bias = repconv_merge(b)
    x = rng.normal(size=(1, 3, 4, 4))
    via_merge = conv2d_loops(x, kernel, bias, pad=1)
    direct = (
        conv2d_loops(x, b.w3.data, b.b3.data, pad=1)
        + conv2d_loops(x, b.w1.data, b.b1.data)
        + x
        + b.b_identity.data.reshape(1, 3, 1, 1)
    )
    np.testing.assert_allclose(via_merge, direct, atol=1e-5)
    assert T.conv2d(Tensor(x), Tensor(kernel), Tensor(bias), pad=1).shape == (1, 3, 4, 4)
