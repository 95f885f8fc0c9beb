"""Classical label cleanup: largest-component filtering and atlas masking."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .eval import aggregate_mean, DiceReport


def _structure(connectivity):
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return np.ones((3, 3, 3), dtype=bool)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(binary, connectivity=26):
    """Label a binary grid; returns (labeled grid, sizes array).

    sizes[i] is the voxel count of component i+1; components are numbered
    from 1, background is 0.
    """
    binary = np.asarray(binary).astype(bool)
    if binary.ndim != 3:
        raise ValueError(f"expected a 3-d grid, got shape {binary.shape}")
    labeled, count = ndimage.label(binary, structure=_structure(connectivity))
    sizes = np.bincount(labeled.ravel(), minlength=count + 1)[1:]
    return labeled, sizes


def largest_component_filter(labelmap, classes, connectivity=26):
    """Keep only each listed class's largest component; rest to background.

    Size ties keep the component with the smallest label id (the first one
    found in scan order).
    """
    out = np.asarray(labelmap).copy()
    for k in classes:
        mask = out == k
        if not mask.any():
            continue
        labeled, sizes = connected_components(mask, connectivity)
        keep = int(np.argmax(sizes)) + 1
        out[mask & (labeled != keep)] = 0
    return out


@dataclass
class Atlas:
    """Per-class plausibility probabilities at a reference grid shape.

    probabilities has shape (num_classes, *reference_shape) for foreground
    classes 1..num_classes.  The mask for a class is probability > threshold
    dilated by dilation_radius (cubic kernel).
    """

    probabilities: np.ndarray
    dilation_radius: int = 0
    threshold: float = 0.0

    def __post_init__(self):
        if self.probabilities.ndim != 4:
            raise ValueError(
                f"atlas probabilities must be (classes, D, H, W), got "
                f"{self.probabilities.shape}"
            )
        if self.probabilities.min() < 0 or self.probabilities.max() > 1:
            raise ValueError("atlas probabilities must lie in [0, 1]")
        if self.dilation_radius < 0:
            raise ValueError("dilation_radius must be >= 0")

    @property
    def num_classes(self):
        return self.probabilities.shape[0]

    @property
    def reference_shape(self):
        return self.probabilities.shape[1:]

    def class_mask(self, k, shape=None, radius=None):
        """Binary plausibility mask for class k, optionally resampled."""
        if not 1 <= k <= self.num_classes:
            raise ValueError(f"class {k} outside 1..{self.num_classes}")
        r = self.dilation_radius if radius is None else radius
        mask = dilate(self.probabilities[k - 1] > self.threshold, r)
        if shape is not None and tuple(shape) != self.reference_shape:
            mask = resample_nearest(mask, shape)
        return mask


def resample_nearest(grid, shape):
    """Nearest-neighbor resampling by cell-center index mapping."""
    grid = np.asarray(grid)
    idx = []
    for src, dst in zip(grid.shape, shape):
        i = np.minimum((np.arange(dst) + 0.5) * src / dst, src - 1).astype(np.int64)
        idx.append(i)
    return grid[np.ix_(*idx)]


def build_atlas(label_volumes, reference_shape, num_classes):
    """Average nearest-neighbor-resampled one-hot labels over volumes."""
    label_volumes = list(label_volumes)
    if not label_volumes:
        raise ValueError("need at least one label volume")
    acc = np.zeros((num_classes,) + tuple(reference_shape), dtype=np.float64)
    for labels in label_volumes:
        res = resample_nearest(np.asarray(labels), reference_shape)
        for k in range(1, num_classes + 1):
            acc[k - 1] += res == k
    return Atlas(probabilities=acc / len(label_volumes))


def dilate(mask, radius):
    """Binary dilation with a cubic structuring element of half-width radius."""
    mask = np.asarray(mask).astype(bool)
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if radius == 0 or not mask.any():
        return mask.copy()
    size = 2 * int(radius) + 1
    return ndimage.binary_dilation(mask, structure=np.ones((size,) * 3, dtype=bool))


def atlas_mask(prediction, atlas: Atlas, radius=None):
    """Erase predicted voxels lying outside their class's dilated mask."""
    out = np.asarray(prediction).copy()
    for k in range(1, atlas.num_classes + 1):
        sel = out == k
        if not sel.any():
            continue
        mask = atlas.class_mask(k, shape=out.shape, radius=radius)
        out[sel & ~mask] = 0
    return out


def optimize_dilation(atlas: Atlas, predictions, references, radii):
    """Radius from the candidate list maximizing mean masked Dice.

    Ties go to the smallest radius (candidates are scanned in ascending
    order and only strict improvements replace the incumbent).
    """
    radii = sorted(set(int(r) for r in radii))
    if not radii:
        raise ValueError("no candidate radii given")
    predictions = list(predictions)
    references = list(references)
    if len(predictions) != len(references) or not predictions:
        raise ValueError("need equally many predictions and references")
    best_radius, best_score = None, -1.0
    for r in radii:
        reports = [DiceReport.from_labelmaps(atlas_mask(p, atlas, radius=r), ref,
                                             atlas.num_classes)
                   for p, ref in zip(predictions, references)]
        score = aggregate_mean(reports)
        score = -1.0 if score is None else score
        if score > best_score:
            best_radius, best_score = r, score
    return best_radius


def save_atlas(atlas: Atlas, directory):
    """One RV01 grid per class plus a structured-text sidecar."""
    from .data import write_volume
    from .location import Volume

    os.makedirs(directory, exist_ok=True)
    for k in range(1, atlas.num_classes + 1):
        vol = Volume(intensities=atlas.probabilities[k - 1].astype(np.float64))
        write_volume(vol, os.path.join(directory, f"class_{k}.rv01"))
    with open(os.path.join(directory, "atlas.txt"), "w") as f:
        f.write(f"num_classes {atlas.num_classes}\n")
        f.write("reference_shape {} {} {}\n".format(*atlas.reference_shape))
        f.write(f"dilation_radius {atlas.dilation_radius}\n")
        f.write(f"threshold {atlas.threshold!r}\n")


def load_atlas(directory):
    from .data import read_volume

    meta_path = os.path.join(directory, "atlas.txt")
    fields = {}
    with open(meta_path) as f:
        for line in f:
            key, _, rest = line.strip().partition(" ")
            fields[key] = rest
    try:
        num_classes = int(fields["num_classes"])
        radius = int(fields["dilation_radius"])
        threshold = float(fields["threshold"])
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{meta_path}: malformed atlas sidecar ({exc})") from exc
    probs = np.stack([
        read_volume(os.path.join(directory, f"class_{k}.rv01")).intensities
        for k in range(1, num_classes + 1)
    ])
    return Atlas(probabilities=probs, dilation_radius=radius, threshold=threshold)
