"""Structured ops: forward values against independent oracles, plus errors."""

import numpy as np
import pytest

from locseg import ops
from locseg.tensor import Tensor


def conv3d_reference(x, w, b, stride, padding):
    """Direct sliding-window definition, independent of the im2col path."""
    n, c, d, h, wd = x.shape
    cout, _, kd, kh, kw = w.shape
    sd, sh, sw = stride
    pd, ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    od = (d + 2 * pd - kd) // sd + 1
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, cout, od, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for co in range(cout):
            for i in range(od):
                for j in range(oh):
                    for l in range(ow):
                        window = xp[ni, :, i * sd:i * sd + kd,
                                    j * sh:j * sh + kh, l * sw:l * sw + kw]
                        out[ni, co, i, j, l] = (window * w[co]).sum() + b[co]
    return out


class TestConv3d:
    def test_identity_kernel(self):
        x = Tensor(np.ones((1, 1, 3, 3, 3), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 1, 1, 1), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        out = ops.conv3d(x, w, b)
        assert np.array_equal(out.data, x.data)

    def test_zero_weight_gives_constant_bias(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 3, 4, 4, 4)).astype(np.float32))
        w = Tensor(np.zeros((2, 3, 3, 3, 3), dtype=np.float32))
        b = Tensor(np.array([1.5, -2.0], dtype=np.float32))
        out = ops.conv3d(x, w, b, padding=1)
        assert np.allclose(out.data[:, 0], 1.5)
        assert np.allclose(out.data[:, 1], -2.0)

    def test_full_kernel_sums_input(self):
        x = Tensor(np.arange(8, dtype=np.float32).reshape(1, 1, 2, 2, 2))
        w = Tensor(np.ones((1, 1, 2, 2, 2), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        out = ops.conv3d(x, w, b)
        assert out.shape == (1, 1, 1, 1, 1)
        assert out.data.reshape(()) == 28.0

    def test_output_extent_formula(self):
        x = Tensor(np.zeros((1, 1, 7, 8, 9), dtype=np.float32))
        w = Tensor(np.zeros((1, 1, 3, 3, 3), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        assert ops.conv3d(x, w, b, stride=2, padding=1).shape == (1, 1, 4, 4, 5)
        assert ops.conv3d(x, w, b, stride=1, padding=0).shape == (1, 1, 5, 6, 7)

    def test_matches_direct_reference_on_random_shapes(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            d, h, w_ = rng.integers(1, 5, size=3)
            kd = int(rng.integers(1, d + 1))
            kh = int(rng.integers(1, h + 1))
            kw = int(rng.integers(1, w_ + 1))
            stride = tuple(int(s) for s in rng.integers(1, 3, size=3))
            pad = tuple(int(p) for p in rng.integers(0, 2, size=3))
            n, c, cout = 2, 2, 3
            x = rng.normal(size=(n, c, d, h, w_)).astype(np.float32)
            wt = rng.normal(size=(cout, c, kd, kh, kw)).astype(np.float32)
            bs = rng.normal(size=cout).astype(np.float32)
            got = ops.conv3d(Tensor(x), Tensor(wt), Tensor(bs), stride, pad).data
            want = conv3d_reference(x, wt, bs, stride, pad)
            assert got.shape == want.shape
            assert np.allclose(got, want, atol=1e-5)

    def test_shape_errors(self):
        x = Tensor(np.zeros((1, 2, 3, 3, 3), dtype=np.float32))
        w_bad_c = Tensor(np.zeros((1, 3, 2, 2, 2), dtype=np.float32))
        w = Tensor(np.zeros((1, 2, 2, 2, 2), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        with pytest.raises(ValueError):
            ops.conv3d(x, w_bad_c, b)
        with pytest.raises(ValueError):
            ops.conv3d(x, w, Tensor(np.zeros(2, dtype=np.float32)))
        with pytest.raises(ValueError):
            ops.conv3d(x, w, b, stride=0)
        big = Tensor(np.zeros((1, 2, 4, 4, 4), dtype=np.float32))
        with pytest.raises(ValueError):
            ops.conv3d(x, big, b)


class TestConv1d:
    def test_identity_kernel(self):
        x = Tensor(np.arange(5, dtype=np.float32).reshape(1, 1, 5))
        w = Tensor(np.ones((1, 1, 1), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        assert np.array_equal(ops.conv1d(x, w, b).data, x.data)

    def test_pairwise_sums(self):
        x = Tensor(np.array([[[1.0, 2.0, 3.0]]], dtype=np.float32))
        w = Tensor(np.array([[[1.0, 1.0]]], dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        assert np.array_equal(ops.conv1d(x, w, b).data, [[[3.0, 5.0]]])

    def test_zero_weight_constant_bias(self):
        x = Tensor(np.ones((2, 3, 4), dtype=np.float32))
        w = Tensor(np.zeros((1, 3, 3), dtype=np.float32))
        b = Tensor(np.array([2.0], dtype=np.float32))
        assert np.allclose(ops.conv1d(x, w, b, padding=1).data, 2.0)

    def test_same_padding_preserves_length(self):
        x = Tensor(np.zeros((1, 2, 7), dtype=np.float32))
        w = Tensor(np.zeros((4, 2, 3), dtype=np.float32))
        b = Tensor(np.zeros(4, dtype=np.float32))
        assert ops.conv1d(x, w, b, padding=1).shape == (1, 4, 7)

    def test_matches_conv3d_on_flat_volumes(self):
        # a (N,C,L) signal is a (N,C,L,1,1) volume; the two convs must agree
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 6)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        got = ops.conv1d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
        want = ops.conv3d(
            Tensor(x[..., None, None]), Tensor(w[..., None, None]), Tensor(b),
            padding=(1, 0, 0),
        ).data[..., 0, 0]
        assert np.allclose(got, want, atol=1e-6)


class TestInstanceNorm:
    def _params(self, c, gamma=1.0, beta=0.0):
        return (Tensor(np.full(c, gamma, dtype=np.float32)),
                Tensor(np.full(c, beta, dtype=np.float32)))

    def test_constant_input_maps_to_zero(self):
        x = Tensor(np.full((1, 2, 3, 3, 3), 7.0, dtype=np.float32))
        g, b = self._params(2)
        assert np.allclose(ops.instance_norm(x, g, b).data, 0.0, atol=1e-2)

    def test_zero_gamma_gives_constant_beta(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(1, 2, 4, 4, 4)).astype(np.float32))
        g, b = self._params(2, gamma=0.0, beta=3.0)
        assert np.allclose(ops.instance_norm(x, g, b).data, 3.0)

    def test_two_point_channel(self):
        x = Tensor(np.array([0.0, 2.0], dtype=np.float32).reshape(1, 1, 2, 1, 1))
        g, b = self._params(1)
        out = ops.instance_norm(x, g, b).data.ravel()
        assert np.allclose(out, [-1.0, 1.0], atol=1e-2)

    def test_normalizes_each_sample_channel(self):
        rng = np.random.default_rng(5)
        for seed in range(5):
            rng = np.random.default_rng(seed)
            x = rng.normal(2.0, 3.0, size=(2, 3, 4, 5, 6)).astype(np.float32)
            g, b = self._params(3)
            out = ops.instance_norm(Tensor(x), g, b).data
            mu = out.mean(axis=(2, 3, 4))
            sd = out.std(axis=(2, 3, 4))
            assert np.allclose(mu, 0.0, atol=1e-5)
            assert np.allclose(sd, 1.0, atol=1e-3)

    def test_param_shape_errors(self):
        x = Tensor(np.zeros((1, 2, 3, 3, 3), dtype=np.float32))
        g, b = self._params(3)
        with pytest.raises(ValueError):
            ops.instance_norm(x, g, b)


class TestPoolAvg:
    def test_ones_stay_ones(self):
        x = Tensor(np.ones((2, 3, 4, 5, 6), dtype=np.float32))
        for axis, extent in ((0, 4), (1, 5), (2, 6)):
            out = ops.pool_avg_over_axes(x, axis)
            assert out.shape == (2, 3, extent)
            assert np.allclose(out.data, 1.0)

    def test_depth_profile_passthrough(self):
        x = Tensor(np.array([3.0, 5.0], dtype=np.float32).reshape(1, 1, 2, 1, 1))
        assert np.array_equal(ops.pool_avg_over_axes(x, 0).data, [[[3.0, 5.0]]])

    def test_mean_over_other_axes(self):
        x = Tensor(np.arange(8, dtype=np.float32).reshape(1, 1, 2, 2, 2))
        assert np.array_equal(ops.pool_avg_over_axes(x, 2).data, [[[3.0, 4.0]]])

    def test_matches_numpy_mean(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 4, 3, 5, 7)).astype(np.float32)
        for axis, reduce_axes in ((0, (3, 4)), (1, (2, 4)), (2, (2, 3))):
            got = ops.pool_avg_over_axes(Tensor(x), axis).data
            assert np.allclose(got, x.mean(axis=reduce_axes), atol=1e-6)

    def test_bad_axis_rejected(self):
        x = Tensor(np.zeros((1, 1, 2, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            ops.pool_avg_over_axes(x, 3)


class TestMaxPoolAndUpConv:
    def test_constant_volume_halves(self):
        x = Tensor(np.full((1, 2, 4, 6, 8), 2.5, dtype=np.float32))
        out = ops.max_pool3d(x)
        assert out.shape == (1, 2, 2, 3, 4)
        assert np.all(out.data == 2.5)

    def test_block_max(self):
        x = Tensor(np.arange(8, dtype=np.float32).reshape(1, 1, 2, 2, 2))
        assert ops.max_pool3d(x).data.reshape(()) == 7.0

    def test_matches_blockwise_oracle(self):
        rng = np.random.default_rng(11)
        for seed in range(5):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(2, 3, 4, 6, 2)).astype(np.float32)
            got = ops.max_pool3d(Tensor(x)).data
            want = x.reshape(2, 3, 2, 2, 3, 2, 1, 2).max(axis=(3, 5, 7))
            assert np.array_equal(got, want)

    def test_odd_extent_rejected(self):
        x = Tensor(np.zeros((1, 1, 3, 4, 4), dtype=np.float32))
        with pytest.raises(ValueError):
            ops.max_pool3d(x)

    def test_up_conv_doubles_and_replicates(self):
        x = Tensor(np.array([[[[[2.0]]]]], dtype=np.float32))
        w = Tensor(np.ones((1, 1, 2, 2, 2), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        out = ops.up_conv3d(x, w, b)
        assert out.shape == (1, 1, 2, 2, 2)
        assert np.all(out.data == 2.0)

    def test_up_conv_blocks_do_not_overlap(self):
        # each input voxel paints its own 2x2x2 block scaled by the kernel
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 1, 2, 1, 1)).astype(np.float32)
        w = rng.normal(size=(1, 1, 2, 2, 2)).astype(np.float32)
        b = Tensor(np.zeros(1, dtype=np.float32))
        out = ops.up_conv3d(Tensor(x), Tensor(w), b).data
        assert np.allclose(out[0, 0, :2, :, :], x[0, 0, 0, 0, 0] * w[0, 0])
        assert np.allclose(out[0, 0, 2:, :, :], x[0, 0, 1, 0, 0] * w[0, 0])

    def test_up_conv_channel_mixing(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 3, 2, 2, 2)).astype(np.float32)
        w = rng.normal(size=(3, 4, 2, 2, 2)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        out = ops.up_conv3d(Tensor(x), Tensor(w), Tensor(b)).data
        assert out.shape == (2, 4, 4, 4, 4)
        # check one output voxel by hand: block (0,0,0), offset (1,0,1)
        want = (x[1, :, 0, 0, 0] * w[:, 2, 1, 0, 1]).sum() + b[2]
        assert np.allclose(out[1, 2, 1, 0, 1], want, atol=1e-6)


class TestConcatAndBroadcast:
    def test_concat_channels(self):
        a = Tensor(np.ones((1, 2, 2, 2, 2), dtype=np.float32))
        b = Tensor(np.zeros((1, 3, 2, 2, 2), dtype=np.float32))
        out = ops.concat([a, b], axis=1)
        assert out.shape == (1, 5, 2, 2, 2)
        assert np.all(out.data[:, :2] == 1) and np.all(out.data[:, 2:] == 0)

    def test_concat_shape_mismatch(self):
        a = Tensor(np.zeros((1, 2, 2, 2, 2), dtype=np.float32))
        b = Tensor(np.zeros((1, 2, 3, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            ops.concat([a, b], axis=1)

    def test_concat_gradient_splits(self):
        a = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        b = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
        out = ops.concat([a, b], axis=1)
        (out * out).sum().backward()
        assert a.grad.shape == (2, 2) and b.grad.shape == (2, 3)
        assert np.allclose(a.grad, 2.0) and np.allclose(b.grad, 2.0)

    def test_gate_of_ones_is_identity(self):
        rng = np.random.default_rng(4)
        f = Tensor(rng.normal(size=(1, 2, 3, 4, 5)).astype(np.float32))
        g = Tensor(np.ones((1, 2, 4), dtype=np.float32))
        assert np.array_equal(ops.broadcast_mul(g, f, 1).data, f.data)

    def test_gate_of_zeros_kills_features(self):
        f = Tensor(np.ones((1, 1, 2, 2, 2), dtype=np.float32))
        g = Tensor(np.zeros((1, 1, 2), dtype=np.float32))
        assert np.all(ops.broadcast_mul(g, f, 2).data == 0)

    def test_gate_scales_along_depth(self):
        f = Tensor(np.array([4.0, 5.0], dtype=np.float32).reshape(1, 1, 2, 1, 1))
        g = Tensor(np.array([[[1.0, 2.0]]], dtype=np.float32))
        out = ops.broadcast_mul(g, f, 0).data.ravel()
        assert np.array_equal(out, [4.0, 10.0])

    def test_matches_reshaped_multiply(self):
        rng = np.random.default_rng(6)
        f = rng.normal(size=(2, 3, 4, 5, 6)).astype(np.float32)
        for axis in (0, 1, 2):
            L = f.shape[2 + axis]
            g = rng.normal(size=(2, 3, L)).astype(np.float32)
            shape = [2, 3, 1, 1, 1]
            shape[2 + axis] = L
            want = f * g.reshape(shape)
            got = ops.broadcast_mul(Tensor(g), Tensor(f), axis).data
            assert np.array_equal(got, want)

    def test_gate_length_mismatch_rejected(self):
        f = Tensor(np.zeros((1, 1, 2, 3, 4), dtype=np.float32))
        g = Tensor(np.zeros((1, 1, 3), dtype=np.float32))
        with pytest.raises(ValueError):
            ops.broadcast_mul(g, f, 0)

    def test_channel_affine_values(self):
        x = Tensor(np.ones((1, 2, 3), dtype=np.float32))
        s = Tensor(np.array([2.0, -1.0], dtype=np.float32))
        b = Tensor(np.array([0.5, 0.0], dtype=np.float32))
        out = ops.channel_affine(x, s, b).data
        assert np.allclose(out[0, 0], 2.5) and np.allclose(out[0, 1], -1.0)


def dice_ce_reference(z, target, smooth=1e-5):
    """Scalar oracle written with explicit per-class loops."""
    n, k = z.shape[:2]
    z64 = z.astype(np.float64)
    e = np.exp(z64 - z64.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    ce = 0.0
    for idx in np.ndindex(target.shape):
        full = (idx[0], target[idx]) + idx[1:]
        ce -= np.log(p[full])
    ce /= target.size
    dices = []
    for ni in range(n):
        for kk in range(1, k):
            pk = p[ni, kk]
            tk = (target[ni] == kk).astype(np.float64)
            inter = (pk * tk).sum()
            dices.append((2 * inter + smooth) / (pk.sum() + tk.sum() + smooth))
    dice = np.mean(dices) if dices else 1.0
    return ce + (1.0 - dice)


class TestDiceCeLoss:
    def test_uniform_logits_ce_is_log2(self):
        z = Tensor(np.zeros((1, 2, 2, 2, 2), dtype=np.float32))
        target = np.zeros((1, 2, 2, 2), dtype=np.int64)
        target[0, 0] = 1
        loss = ops.dice_ce_loss(z, target)
        assert np.isclose(loss.ce_value, np.log(2.0), atol=1e-6)

    def test_confident_correct_logits_drive_loss_to_zero(self):
        rng = np.random.default_rng(0)
        target = rng.integers(0, 3, size=(1, 4, 4, 4))
        z = np.full((1, 3, 4, 4, 4), -20.0, dtype=np.float32)
        np.put_along_axis(z, target[:, None], 20.0, axis=1)
        loss = ops.dice_ce_loss(Tensor(z), target)
        assert loss.ce_value < 1e-6
        assert abs(loss.dice_value) < 1e-3
        assert float(loss.data) < 1e-3

    def test_matches_scalar_oracle(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            k = int(rng.integers(2, 5))
            z = rng.normal(size=(2, k, 3, 3, 3)).astype(np.float32)
            target = rng.integers(0, k, size=(2, 3, 3, 3))
            loss = ops.dice_ce_loss(Tensor(z), target)
            want = dice_ce_reference(z, target)
            assert np.isclose(float(loss.data), want, atol=1e-5)

    def test_loss_decomposes_into_logged_parts(self):
        rng = np.random.default_rng(3)
        z = Tensor(rng.normal(size=(1, 3, 2, 2, 2)).astype(np.float32))
        target = rng.integers(0, 3, size=(1, 2, 2, 2))
        loss = ops.dice_ce_loss(z, target)
        assert np.isclose(float(loss.data), loss.ce_value + loss.dice_value, atol=1e-6)

    def test_label_range_checked(self):
        z = Tensor(np.zeros((1, 2, 2, 2, 2), dtype=np.float32))
        bad = np.full((1, 2, 2, 2), 2, dtype=np.int64)
        with pytest.raises(ValueError):
            ops.dice_ce_loss(z, bad)

    def test_target_shape_checked(self):
        z = Tensor(np.zeros((1, 2, 2, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            ops.dice_ce_loss(z, np.zeros((1, 3, 2, 2), dtype=np.int64))
