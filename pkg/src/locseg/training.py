"""Deterministic patch-based training with periodic whole-volume validation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .eval import evaluate_volumes
from .location import sample_patch
from .optim import SGD, poly_lr


@dataclass
class TrainSchedule:
    iterations: int = 200
    batch_size: int = 2
    patch_shape: tuple = (16, 16, 16)
    base_lr: float = 0.01
    momentum: float = 0.99
    nesterov: bool = True
    weight_decay: float = 3e-5
    poly_power: float = 0.9
    fg_prob: float = 0.33
    val_interval: int = 0
    val_overlap: float = 0.0

    def validate(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if len(self.patch_shape) != 3 or any(e < 1 for e in self.patch_shape):
            raise ValueError(f"bad patch_shape {self.patch_shape}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")


@dataclass
class TrainingLog:
    """Per-iteration rows: iteration, lr, loss, ce, dice_loss, val_dice."""

    rows: list = field(default_factory=list)

    COLUMNS = ("iteration", "lr", "loss", "ce", "dice_loss", "val_dice")

    def add(self, **row):
        self.rows.append({c: row.get(c) for c in self.COLUMNS})

    def final_val_dice(self):
        vals = [r["val_dice"] for r in self.rows if r["val_dice"] is not None]
        return vals[-1] if vals else None

    def losses(self):
        return [r["loss"] for r in self.rows]

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write(",".join(self.COLUMNS) + "\n")
            for row in self.rows:
                f.write(",".join("" if row[c] is None else repr(row[c])
                                 if isinstance(row[c], float) else str(row[c])
                                 for c in self.COLUMNS) + "\n")


def make_batch(volumes, patch_shape, batch_size, rng, fg_prob=0.33):
    """Sample a batch: (N,1,D,H,W) float32, (N,D,H,W) labels, locations."""
    patches, labels, locs = [], [], []
    for _ in range(batch_size):
        vol = volumes[int(rng.integers(len(volumes)))]
        patch, lab, loc = sample_patch(vol, patch_shape, rng, fg_prob=fg_prob)
        if lab is None:
            raise ValueError("training requires labeled volumes")
        patches.append(patch)
        labels.append(lab)
        locs.append(loc)
    x = np.stack(patches)[:, None].astype(np.float32)
    y = np.stack(labels).astype(np.int64)
    return x, y, locs


def train(model, dataset, schedule: TrainSchedule, seed=0):
    """Run the schedule; returns the TrainingLog.  Fully seeded.

    Validation (sliding-window mean Dice over the val split) runs every
    val_interval iterations and always on the last one; val_interval 0
    means final-only.
    """
    schedule.validate()
    train_vols = dataset.split("train")
    if not train_vols:
        raise ValueError("dataset has no training volumes")
    val_vols = dataset.split("val")
    rng = np.random.default_rng(seed)
    opt = SGD(model.parameters(), lr=schedule.base_lr, momentum=schedule.momentum,
              nesterov=schedule.nesterov, weight_decay=schedule.weight_decay)
    log = TrainingLog()
    num_fg = model.config.num_classes - 1
    needs_loc = model.config.location_mode != "none"

    for it in range(schedule.iterations):
        lr = poly_lr(schedule.base_lr, it, schedule.iterations, schedule.poly_power)
        opt.lr = lr
        x, y, locs = make_batch(train_vols, schedule.patch_shape, schedule.batch_size,
                                rng, fg_prob=schedule.fg_prob)
        logits = model.forward(x, locs if needs_loc else None)
        loss = ops.dice_ce_loss(logits, y)
        model.zero_grad()
        loss.backward()
        opt.step()

        val_dice = None
        last = it == schedule.iterations - 1
        due = schedule.val_interval and (it + 1) % schedule.val_interval == 0
        if val_vols and (last or due):
            val_dice, _ = evaluate_volumes(model, val_vols, schedule.patch_shape,
                                           num_fg, overlap=schedule.val_overlap)
        log.add(iteration=it, lr=lr, loss=float(loss.data), ce=loss.ce_value,
                dice_loss=loss.dice_value, val_dice=val_dice)
    return log
