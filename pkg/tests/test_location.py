"""Axial score maps, normalized coordinates and patch sampling."""

import numpy as np
import pytest

from locseg.location import (
    BprMap,
    PatchLocation,
    Volume,
    axis_indices,
    bpr_score,
    coord_channels,
    fit_bpr_map,
    normalized_coords,
    ptvc,
    sample_patch,
)


class TestBprScore:
    def test_affine_arithmetic(self):
        assert bpr_score(30, BprMap(0.5, 10.0)) == 25.0

    def test_full_range_fit_midpoint(self):
        m = fit_bpr_map([(0, 0.0), (100, 100.0)])
        assert np.isclose(bpr_score(50, m), 50.0)

    def test_no_clamping_below_or_above(self):
        m = BprMap(1.0, 0.0)
        assert bpr_score(-5, m) == -5.0
        assert bpr_score(140, m) == 140.0

    def test_affine_identity(self):
        m = BprMap(0.7, 3.0)
        rng = np.random.default_rng(0)
        for _ in range(20):
            z1, z2 = rng.uniform(-50, 150, size=2)
            assert np.isclose(bpr_score(z1, m) + bpr_score(z2, m),
                              bpr_score(z1 + z2, m) + m.b)


class TestFitBprMap:
    def test_two_anchor_interpolation(self):
        m = fit_bpr_map([(0, 0.0), (100, 100.0)])
        assert np.isclose(m.a, 1.0) and np.isclose(m.b, 0.0)
        m = fit_bpr_map([(10, 0.0), (110, 100.0)])
        assert np.isclose(m.a, 1.0) and np.isclose(m.b, -10.0)

    def test_collinear_anchors_fit_exactly(self):
        m = fit_bpr_map([(0, 5.0), (10, 25.0), (20, 45.0)])
        assert np.isclose(m.a, 2.0) and np.isclose(m.b, 5.0)

    def test_single_anchor_rejected(self):
        with pytest.raises(ValueError):
            fit_bpr_map([(0, 0.0)])


class TestPtvc:
    def test_table_values(self):
        assert ptvc((32, 32, 32), (64, 64, 64)) == 12.5
        assert ptvc((16, 16, 16), (16, 16, 16)) == 100.0

    def test_scale_consistency(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = rng.integers(1, 40, size=3)
            v = p + rng.integers(0, 40, size=3)
            assert np.isclose(ptvc(p, v), ptvc(2 * p, 2 * v))

    def test_empty_volume_rejected(self):
        with pytest.raises(ValueError):
            ptvc((1, 1, 1), (0, 4, 4))


class TestVolume:
    def test_validation(self):
        with pytest.raises(ValueError):
            Volume(intensities=np.zeros((4, 4)))
        with pytest.raises(ValueError):
            Volume(intensities=np.zeros((4, 4, 4)), labels=np.zeros((4, 4, 3)))
        with pytest.raises(ValueError):
            Volume(intensities=np.zeros((4, 4, 4)), spacing=(1.0, 0.0, 1.0))

    def test_shape_property(self):
        v = Volume(intensities=np.zeros((2, 3, 4), dtype=np.float32))
        assert v.shape == (2, 3, 4)


class TestPatchLocation:
    def test_out_of_bounds_rejected(self):
        with pytest.raises(ValueError):
            PatchLocation(origin=(5, 0, 0), patch_shape=(4, 4, 4),
                          volume_shape=(8, 8, 8), bpr_map=BprMap(1.0, 0.0))

    def test_with_shift_skips_bounds_check(self):
        loc = PatchLocation(origin=(0, 0, 0), patch_shape=(4, 4, 4),
                            volume_shape=(8, 8, 8), bpr_map=BprMap(1.0, 0.0))
        shifted = loc.with_shift(1.0)
        assert shifted.shift_fraction == 1.0
        assert shifted.origin == loc.origin
        assert loc.shift_fraction == 0.0


def _loc(origin=(0, 0, 0), patch=(4, 4, 4), volume=(8, 8, 8), a=1.0, b=0.0,
         shift=0.0):
    base = PatchLocation(origin=origin, patch_shape=patch, volume_shape=volume,
                         bpr_map=BprMap(a, b))
    return base.with_shift(shift) if shift else base


class TestNormalizedCoords:
    def test_full_width_patch_spans_minus_one_to_one(self):
        loc = _loc(patch=(4, 8, 8))
        cx = normalized_coords(loc, 2)
        assert np.isclose(cx[0], -1.0) and np.isclose(cx[-1], 1.0)
        assert np.all(np.diff(cx) > 0)

    def test_axial_is_score_over_100(self):
        loc = _loc(origin=(2, 0, 0), a=10.0, b=5.0)
        want = (10.0 * np.arange(2, 6) + 5.0) / 100.0
        assert np.allclose(normalized_coords(loc, 0), want)

    def test_shift_adds_exactly_on_axial_only(self):
        for f in (0.05, 0.25, 1.0):
            plain = _loc(origin=(1, 2, 3))
            shifted = _loc(origin=(1, 2, 3), shift=f)
            assert np.allclose(normalized_coords(shifted, 0),
                               normalized_coords(plain, 0) + f)
            for axis in (1, 2):
                assert np.array_equal(normalized_coords(shifted, axis),
                                      normalized_coords(plain, axis))

    def test_in_plane_uses_global_position(self):
        left = _loc(origin=(0, 0, 0))
        right = _loc(origin=(0, 0, 4))
        cl = normalized_coords(left, 2)
        cr = normalized_coords(right, 2)
        assert np.all(cr > cl[-1] - 1e-12)

    def test_singleton_volume_axis_is_zero(self):
        loc = _loc(origin=(0, 0, 0), patch=(4, 1, 1), volume=(8, 1, 1))
        assert np.array_equal(normalized_coords(loc, 1), [0.0])

    def test_bad_axis_rejected(self):
        with pytest.raises(ValueError):
            normalized_coords(_loc(), 3)


class TestAxisIndices:
    def test_native_resolution_is_origin_plus_offsets(self):
        loc = _loc(origin=(3, 0, 0))
        assert np.array_equal(axis_indices(loc, 0), [3.0, 4.0, 5.0, 6.0])

    def test_downsampled_indices_are_cell_centers(self):
        loc = _loc(origin=(4, 0, 0), patch=(8, 4, 4), volume=(16, 8, 8))
        # factor 2: slice i covers voxels 4+2i .. 4+2i+1, center 4+2i+0.5
        assert np.array_equal(axis_indices(loc, 0, length=4),
                              [4.5, 6.5, 8.5, 10.5])

    def test_downsampled_centers_average_native_indices(self):
        loc = _loc(origin=(2, 0, 0), patch=(8, 4, 4), volume=(16, 8, 8))
        native = axis_indices(loc, 0)
        coarse = axis_indices(loc, 0, length=2)
        assert np.allclose(coarse, native.reshape(2, 4).mean(axis=1))

    def test_non_divisor_length_rejected(self):
        with pytest.raises(ValueError):
            axis_indices(_loc(), 0, length=3)


class TestCoordChannels:
    def test_shape_and_dtype(self):
        out = coord_channels(_loc(patch=(2, 3, 4)))
        assert out.shape == (3, 2, 3, 4)
        assert out.dtype == np.float32

    def test_channels_constant_along_broadcast_axes(self):
        out = coord_channels(_loc(patch=(2, 2, 2)))
        assert np.all(out[0] == out[0][:, :1, :1])
        assert np.all(out[1] == out[1][:1, :, :1])
        assert np.all(out[2] == out[2][:1, :1, :])

    def test_matches_normalized_coords(self):
        loc = _loc(origin=(1, 2, 3), a=2.0, b=-1.0)
        out = coord_channels(loc)
        assert np.allclose(out[0][:, 0, 0], normalized_coords(loc, 0))
        assert np.allclose(out[1][0, :, 0], normalized_coords(loc, 1))
        assert np.allclose(out[2][0, 0, :], normalized_coords(loc, 2))

    def test_shift_changes_axial_channel_only(self):
        plain = coord_channels(_loc())
        shifted = coord_channels(_loc(shift=0.5))
        assert np.allclose(shifted[0], plain[0] + 0.5)
        assert np.array_equal(shifted[1:], plain[1:])


class TestSamplePatch:
    def _volume(self, shape=(10, 10, 10), with_labels=True):
        intensities = np.arange(np.prod(shape), dtype=np.float32).reshape(shape)
        labels = None
        if with_labels:
            labels = np.zeros(shape, dtype=np.uint8)
            labels[6, 6, 6] = 1
        return Volume(intensities=intensities, labels=labels,
                      bpr_map=BprMap(100.0 / (shape[0] - 1), 0.0))

    def test_full_volume_patch_has_zero_origin(self):
        vol = self._volume()
        rng = np.random.default_rng(0)
        for _ in range(5):
            _, _, loc = sample_patch(vol, (10, 10, 10), rng)
            assert loc.origin == (0, 0, 0)

    def test_origin_bounds(self):
        vol = self._volume()
        rng = np.random.default_rng(1)
        seen = set()
        for _ in range(300):
            _, _, loc = sample_patch(vol, (8, 8, 8), rng)
            assert all(o in (0, 1, 2) for o in loc.origin)
            seen.update(loc.origin)
        assert seen == {0, 1, 2}

    def test_patch_matches_volume_slice(self):
        # unique voxel values prove the patch reads exactly its slice
        vol = self._volume()
        rng = np.random.default_rng(2)
        for _ in range(50):
            patch, lab, loc = sample_patch(vol, (4, 6, 5), rng)
            sl = tuple(slice(o, o + p) for o, p in zip(loc.origin, (4, 6, 5)))
            assert np.array_equal(patch, vol.intensities[sl])
            assert np.array_equal(lab, vol.labels[sl])

    def test_seeded_sampling_reproducible(self):
        vol = self._volume()
        origins = [sample_patch(vol, (4, 4, 4), np.random.default_rng(7))[2].origin
                   for _ in range(2)]
        assert origins[0] == origins[1]

    def test_foreground_oversampling_hits_fg(self):
        vol = self._volume()
        rng = np.random.default_rng(3)
        for _ in range(50):
            _, lab, _ = sample_patch(vol, (4, 4, 4), rng, fg_prob=1.0)
            assert lab.max() == 1

    def test_unlabeled_volume_samples_uniformly(self):
        vol = self._volume(with_labels=False)
        rng = np.random.default_rng(4)
        patch, lab, loc = sample_patch(vol, (4, 4, 4), rng, fg_prob=1.0)
        assert lab is None
        assert patch.shape == (4, 4, 4)

    def test_oversized_patch_rejected(self):
        vol = self._volume()
        with pytest.raises(ValueError):
            sample_patch(vol, (12, 4, 4), np.random.default_rng(0))

    def test_returned_patch_is_a_copy(self):
        vol = self._volume()
        patch, _, loc = sample_patch(vol, (4, 4, 4), np.random.default_rng(5))
        patch += 1000.0
        sl = tuple(slice(o, o + 4) for o in loc.origin)
        assert vol.intensities[sl].max() < 1000.0
