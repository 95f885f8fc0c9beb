"""Patch-to-volume coverage sweeps: train per cell, compare location modes."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

from .eval import SweepResult
from .location import ptvc
from .model import build_model
from .training import train


def _patch_key(shape):
    return "x".join(str(int(e)) for e in shape)


def _run_cell(dataset, model_config, schedule, mode, patch_shape, seed, progress):
    if progress:
        progress(f"ptvc cell mode={mode} patch={_patch_key(patch_shape)} seed={seed}")
    cfg = replace(model_config, location_mode=mode)
    cfg.validate()
    model = build_model(cfg, seed=seed)
    cell_schedule = replace(schedule, patch_shape=tuple(patch_shape))
    log = train(model, dataset, cell_schedule, seed=seed)
    return log.final_val_dice()


def ptvc_sweep(dataset, model_config, schedule, patch_shapes, seeds,
               modes=("none", "locbam"), threads=1, progress=None):
    """Train every (mode, patch_shape, seed) cell and tabulate final Dice.

    Each cell gets a freshly built model and its own RNG stream, so cells
    are independent (and may run on worker threads) and the table is
    deterministic for fixed seeds.  A cell counts as converged when its
    final validation mean Dice reaches at least half of the best mode's for
    the same patch shape and seed; the relative_gain_pct column compares
    each location mode against the baseline in the same cell group.
    """
    if not dataset.split("val"):
        raise ValueError("ptvc_sweep needs a validation split to score cells")
    vshape = dataset.split("train")[0].shape
    cols = ["mode", "patch", "seed", "ptvc_pct", "final_val_dice", "converged",
            "relative_gain_pct"]
    result = SweepResult(columns=cols)

    cells = [(mode, tuple(patch_shape), seed)
             for patch_shape in patch_shapes for seed in seeds for mode in modes]
    scores = {}
    errors = {}
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {cell: pool.submit(_run_cell, dataset, model_config, schedule,
                                         cell[0], cell[1], cell[2], progress)
                       for cell in cells}
        for cell, fut in futures.items():
            exc = fut.exception()
            if exc is not None:
                errors[cell] = exc
                scores[(cell[0], _patch_key(cell[1]), cell[2])] = None
            else:
                scores[(cell[0], _patch_key(cell[1]), cell[2])] = fut.result()
    else:
        for mode, patch_shape, seed in cells:
            try:
                score = _run_cell(dataset, model_config, schedule, mode, patch_shape,
                                  seed, progress)
            except Exception as exc:
                errors[(mode, patch_shape, seed)] = exc
                score = None
            scores[(mode, _patch_key(patch_shape), seed)] = score

    for patch_shape in patch_shapes:
        pk = _patch_key(patch_shape)
        for seed in seeds:
            cell = {m: scores[(m, pk, seed)] for m in modes}
            valid = [v for v in cell.values() if v is not None]
            best = max(valid) if valid else None
            base = cell.get("none")
            for mode in modes:
                score = cell[mode]
                converged = (score is not None and best is not None
                             and score >= 0.5 * best)
                gain = None
                if mode != "none" and base and score is not None:
                    gain = 100.0 * (score - base) / base
                result.add({
                    "mode": mode,
                    "patch": pk,
                    "seed": seed,
                    "ptvc_pct": ptvc(patch_shape, vshape),
                    "final_val_dice": score,
                    "converged": converged,
                    "relative_gain_pct": gain,
                })
    return result, errors
