"""Dice metrics, whole-volume sliding-window inference, and shift sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .location import PatchLocation
from .tensor import no_grad

SHIFT_FRACTIONS = (0.0, 0.01, 0.05, 0.10, 0.25, 0.50, 1.00)


def dice(prediction, reference, k):
    """2|P & R| / (|P| + |R|) for class k; defined as 1.0 when both empty."""
    p = prediction == k
    r = reference == k
    denom = int(p.sum()) + int(r.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, r).sum()) / denom


@dataclass
class DiceReport:
    """Per-class Dice for one volume.

    per_class maps class id to a score, or to None when the class is absent
    from both prediction and reference; such classes are excluded from the
    mean.  An all-absent report has mean None.
    """

    per_class: dict = field(default_factory=dict)
    mean: float | None = None

    @classmethod
    def from_labelmaps(cls, prediction, reference, num_classes):
        if prediction.shape != reference.shape:
            raise ValueError(
                f"prediction {prediction.shape} vs reference {reference.shape} shape mismatch"
            )
        per_class = {}
        for k in range(1, num_classes + 1):
            if not (prediction == k).any() and not (reference == k).any():
                per_class[k] = None
            else:
                per_class[k] = dice(prediction, reference, k)
        included = [v for v in per_class.values() if v is not None]
        return cls(per_class=per_class, mean=float(np.mean(included)) if included else None)


def aggregate_mean(reports):
    """Mean of per-volume mean Dice, skipping all-absent volumes."""
    means = [r.mean for r in reports if r.mean is not None]
    return float(np.mean(means)) if means else None


def _window_starts(extent, patch, stride):
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


def sliding_window_predict(model, volume, patch_shape, overlap=0.5, shift_fraction=0.0,
                           return_logits=False):
    """Tile the volume, average logits where windows overlap, argmax.

    Every window's location (with the requested axial shift applied to the
    signal only) is handed to location-aware models; the baseline ignores
    it.  overlap is the fraction of each patch extent shared with the next
    window; 0 partitions the volume when extents divide evenly.
    """
    patch_shape = tuple(int(e) for e in patch_shape)
    vshape = volume.shape
    for p, v in zip(patch_shape, vshape):
        if p > v:
            raise ValueError(f"patch {patch_shape} exceeds volume {vshape}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    strides = [max(1, int(round(p * (1.0 - overlap)))) for p in patch_shape]
    k = model.config.num_classes
    logit_sum = np.zeros((k,) + vshape, dtype=np.float64)
    counts = np.zeros(vshape, dtype=np.int64)
    needs_loc = model.config.location_mode != "none"
    with no_grad():
        for z0 in _window_starts(vshape[0], patch_shape[0], strides[0]):
            for y0 in _window_starts(vshape[1], patch_shape[1], strides[1]):
                for x0 in _window_starts(vshape[2], patch_shape[2], strides[2]):
                    sl = (slice(z0, z0 + patch_shape[0]),
                          slice(y0, y0 + patch_shape[1]),
                          slice(x0, x0 + patch_shape[2]))
                    loc = PatchLocation(origin=(z0, y0, x0), patch_shape=patch_shape,
                                        volume_shape=vshape, bpr_map=volume.bpr_map,
                                        shift_fraction=shift_fraction)
                    x = volume.intensities[sl][None, None].astype(np.float32)
                    logits = model.forward(x, [loc] if needs_loc else None)
                    logit_sum[(slice(None),) + sl] += logits.data[0]
                    counts[sl] += 1
    avg = logit_sum / counts
    labels = np.argmax(avg, axis=0).astype(np.uint8)
    if return_logits:
        return labels, avg
    return labels


def evaluate_volumes(model, volumes, patch_shape, num_fg_classes, overlap=0.5,
                     shift_fraction=0.0):
    """Per-volume DiceReports plus their aggregate mean."""
    reports = []
    for vol in volumes:
        if vol.labels is None:
            raise ValueError("evaluation requires labeled volumes")
        pred = sliding_window_predict(model, vol, patch_shape, overlap=overlap,
                                      shift_fraction=shift_fraction)
        reports.append(DiceReport.from_labelmaps(pred, vol.labels, num_fg_classes))
    return aggregate_mean(reports), reports


@dataclass
class SweepResult:
    """A rectangular results table; rows are dicts over named columns."""

    columns: list
    rows: list = field(default_factory=list)

    def add(self, row):
        if set(row) != set(self.columns):
            raise ValueError(f"row keys {sorted(row)} do not match columns {self.columns}")
        self.rows.append(dict(row))

    def column(self, name):
        return [row[name] for row in self.rows]

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write(",".join(self.columns) + "\n")
            for row in self.rows:
                f.write(",".join(_cell(row[c]) for c in self.columns) + "\n")

    def format_table(self):
        """Plain-text table for logs and reports."""
        widths = [max(len(c), max((len(_cell(r[c])) for r in self.rows), default=0))
                  for c in self.columns]
        lines = ["  ".join(c.ljust(w) for c, w in zip(self.columns, widths))]
        for row in self.rows:
            lines.append("  ".join(_cell(row[c]).ljust(w)
                                   for c, w in zip(self.columns, widths)))
        return "\n".join(lines)


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def shift_sweep(model, volumes, patch_shape, num_fg_classes,
                fractions=SHIFT_FRACTIONS, overlap=0.5):
    """Evaluate under axial location-signal shifts; voxels stay untouched."""
    classes = list(range(1, num_fg_classes + 1))
    cols = ["shift_fraction", "mean_dice"] + [f"dice_class_{k}" for k in classes]
    result = SweepResult(columns=cols)
    for frac in fractions:
        mean, reports = evaluate_volumes(model, volumes, patch_shape, num_fg_classes,
                                         overlap=overlap, shift_fraction=frac)
        row = {"shift_fraction": float(frac), "mean_dice": mean}
        for k in classes:
            vals = [r.per_class[k] for r in reports if r.per_class[k] is not None]
            row[f"dice_class_{k}"] = float(np.mean(vals)) if vals else None
        result.add(row)
    return result


def monotone_degradation(sweep: SweepResult, tolerance=0.0):
    """True when mean Dice never rises by more than tolerance across shifts."""
    means = sweep.column("mean_dice")
    return all(b <= a + tolerance for a, b in zip(means, means[1:]))
