"""Patch sampling with global-location metadata.

A volume carries an affine axial score map (a 0-100 pelvis-to-head scale
fitted per volume), and every sampled patch remembers where it came from.
Location-aware models consume normalized global coordinates derived here;
shift injection perturbs only that signal, never the voxels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class BprMap:
    """Affine map from axial voxel index to a 0-100 body-part score."""

    a: float
    b: float

    def score(self, z):
        return self.a * z + self.b


@dataclass
class Volume:
    """A scalar intensity grid with optional labels and location metadata.

    shape is (D, H, W) with D the axial direction; spacing is mm per voxel
    in (z, y, x) order.
    """

    intensities: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    labels: np.ndarray | None = None
    bpr_map: BprMap = field(default_factory=lambda: BprMap(1.0, 0.0))

    def __post_init__(self):
        if self.intensities.ndim != 3:
            raise ValueError(f"volume intensities must be 3-d, got shape {self.intensities.shape}")
        if self.labels is not None and self.labels.shape != self.intensities.shape:
            raise ValueError(
                f"labels shape {self.labels.shape} does not match intensities {self.intensities.shape}"
            )
        if any(s <= 0 for s in self.spacing) or len(self.spacing) != 3:
            raise ValueError(f"spacing must be 3 positive components, got {self.spacing}")

    @property
    def shape(self):
        return self.intensities.shape


@dataclass(frozen=True)
class PatchLocation:
    """Where a patch sits inside its source volume.

    shift_fraction displaces the axial coordinate signal only (1.0 = a full
    normalized range, an out-of-frame position); sampled voxels are never
    affected.
    """

    origin: tuple
    patch_shape: tuple
    volume_shape: tuple
    bpr_map: BprMap
    shift_fraction: float = 0.0

    def __post_init__(self):
        if self.shift_fraction == 0.0:
            for o, p, v in zip(self.origin, self.patch_shape, self.volume_shape):
                if o < 0 or o + p > v:
                    raise ValueError(
                        f"patch at origin {self.origin} with shape {self.patch_shape} "
                        f"exceeds volume {self.volume_shape}"
                    )

    def with_shift(self, fraction):
        return replace(self, shift_fraction=float(fraction))


def bpr_score(z, bpr_map):
    """Axial score a*z + b, linearly extrapolated outside 0-100 (no clamp)."""
    return bpr_map.a * z + bpr_map.b


def fit_bpr_map(anchor_pairs):
    """Least-squares affine fit of (axial index, score) anchors."""
    pairs = list(anchor_pairs)
    if len(pairs) < 2:
        raise ValueError("need at least two (z, score) anchors to fit an affine map")
    zs = np.asarray([p[0] for p in pairs], dtype=np.float64)
    ss = np.asarray([p[1] for p in pairs], dtype=np.float64)
    a, b = np.polyfit(zs, ss, 1)
    return BprMap(float(a), float(b))


def ptvc(patch_shape, volume_shape):
    """Patch-to-volume coverage: 100 * (patch voxels) / (volume voxels)."""
    p = float(np.prod([int(e) for e in patch_shape], dtype=np.int64))
    v = float(np.prod([int(e) for e in volume_shape], dtype=np.int64))
    if v <= 0:
        raise ValueError(f"volume shape {volume_shape} has no voxels")
    return 100.0 * p / v


def axis_indices(loc: PatchLocation, axis, length=None):
    """Global (possibly fractional) voxel indices of patch slices along an axis.

    With length == patch extent these are origin, origin+1, ...  For a
    feature map pooled by an integer factor, each downsampled slice covers
    `factor` voxels and gets the index of its cell center:
    origin + (i + 0.5) * factor - 0.5.
    """
    extent = loc.patch_shape[axis]
    if length is None:
        length = extent
    if length <= 0 or extent % length != 0:
        raise ValueError(
            f"length {length} does not evenly divide patch extent {extent} on axis {axis}"
        )
    factor = extent // length
    i = np.arange(length, dtype=np.float64)
    return loc.origin[axis] + (i + 0.5) * factor - 0.5


def normalized_coords(loc: PatchLocation, axis, length=None):
    """Per-slice normalized global coordinates of a patch along one axis.

    Axis 0 (axial): bpr score / 100, plus the location shift fraction.
    Axes 1, 2 (in-plane): the global voxel index mapped affinely to [-1, 1]
    over the full volume extent.
    """
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    idx = axis_indices(loc, axis, length)
    if axis == 0:
        return bpr_score(idx, loc.bpr_map) / 100.0 + loc.shift_fraction
    extent = loc.volume_shape[axis]
    if extent == 1:
        return np.zeros_like(idx)
    return 2.0 * idx / (extent - 1) - 1.0


def coord_channels(loc: PatchLocation, dtype=np.float32):
    """Stack of 3 coordinate channels over the patch grid, shape (3, D, H, W).

    Channel 0 broadcasts the axial coordinates over H and W; channels 1 and
    2 broadcast the in-plane coordinates accordingly.
    """
    d, h, w = loc.patch_shape
    cz = normalized_coords(loc, 0)
    cy = normalized_coords(loc, 1)
    cx = normalized_coords(loc, 2)
    out = np.empty((3, d, h, w), dtype=dtype)
    out[0] = cz[:, None, None]
    out[1] = cy[None, :, None]
    out[2] = cx[None, None, :]
    return out


def sample_patch(volume: Volume, patch_shape, rng, fg_prob=0.33):
    """Cut a random patch, returning (intensities, labels, PatchLocation).

    The origin is uniform over valid positions; with probability fg_prob
    (and labels present) the origin is instead drawn so the patch contains a
    randomly chosen foreground voxel, nnU-Net style oversampling.
    """
    patch_shape = tuple(int(e) for e in patch_shape)
    vshape = volume.shape
    for p, v in zip(patch_shape, vshape):
        if p <= 0 or p > v:
            raise ValueError(f"patch shape {patch_shape} does not fit volume {vshape}")

    origin = None
    if volume.labels is not None and fg_prob > 0 and rng.random() < fg_prob:
        fg = np.argwhere(volume.labels > 0)
        if fg.size:
            vox = fg[rng.integers(len(fg))]
            origin = tuple(
                int(rng.integers(max(0, vox[k] - patch_shape[k] + 1),
                                 min(vshape[k] - patch_shape[k], vox[k]) + 1))
                for k in range(3)
            )
    if origin is None:
        origin = tuple(int(rng.integers(0, vshape[k] - patch_shape[k] + 1)) for k in range(3))

    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_shape))
    patch = volume.intensities[sl].copy()
    labels = volume.labels[sl].copy() if volume.labels is not None else None
    loc = PatchLocation(origin=origin, patch_shape=patch_shape, volume_shape=vshape,
                        bpr_map=volume.bpr_map)
    return patch, labels, loc
