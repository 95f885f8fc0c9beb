"""Command-line entry point wiring data, training, evaluation and sweeps.

Every subcommand reads a JSON config (strict: unknown keys are rejected),
writes its outputs plus the resolved config into --out, and is bitwise
reproducible for a fixed config and seed.  Progress goes to stderr; data
goes to files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import data as data_mod
from . import eval as eval_mod
from . import postprocess as post_mod
from .data import Dataset, SyntheticConfig, read_manifest, read_volume, write_manifest, write_volume
from .experiments import ptvc_sweep
from .location import Volume
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import TrainSchedule, train


class CliError(Exception):
    """User-facing configuration or input problem; exits with code 1."""


def _progress(msg):
    print(msg, file=sys.stderr, flush=True)


def _load_config(path):
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    try:
        with open(path) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise CliError(f"{path}: top level must be an object")
    return cfg


def _check_keys(section, allowed, context):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise CliError(f"unknown {context} config keys: {', '.join(unknown)}")


def _require(cfg, key, context):
    if key not in cfg:
        raise CliError(f"missing required {context} config key: {key!r}")
    return cfg[key]


def _write_resolved(out_dir, resolved):
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)
        f.write("\n")


def _tuple3(value, what):
    try:
        t = tuple(int(v) for v in value)
    except (TypeError, ValueError):
        raise CliError(f"{what} must be three integers, got {value!r}")
    if len(t) != 3:
        raise CliError(f"{what} must be three integers, got {value!r}")
    return t


def _model_config(section):
    _check_keys(section, ModelConfig().__dict__, "model")
    cfg = ModelConfig(**section)
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(f"model config: {exc}") from exc
    return cfg


def _schedule(section):
    _check_keys(section, TrainSchedule().__dict__, "schedule")
    section = dict(section)
    if "patch_shape" in section:
        section["patch_shape"] = _tuple3(section["patch_shape"], "schedule.patch_shape")
    sched = TrainSchedule(**section)
    try:
        sched.validate()
    except ValueError as exc:
        raise CliError(f"schedule config: {exc}") from exc
    return sched


def _dataset(manifest_path):
    if not os.path.exists(manifest_path):
        raise CliError(f"data manifest not found: {manifest_path}")
    try:
        return Dataset.from_manifest(manifest_path)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


# -- subcommands --------------------------------------------------------------

GEN_KEYS = tuple(SyntheticConfig().__dict__) + ("split",)


def cmd_gen_data(cfg, out_dir, seed_override):
    _check_keys(cfg, GEN_KEYS, "gen-data")
    split_spec = cfg.pop("split", None)
    fields = dict(cfg)
    for key in ("volume_shape", "blob_radius", "spacing"):
        if key in fields:
            n = 2 if key == "blob_radius" else 3
            fields[key] = tuple(fields[key]) if n == 2 else _tuple3(fields[key], key)
    if "pair_bands" in fields:
        fields["pair_bands"] = tuple(tuple(b) for b in fields["pair_bands"])
    if "anchor_band" in fields:
        fields["anchor_band"] = tuple(fields["anchor_band"])
    if seed_override is not None:
        fields["seed"] = seed_override
    try:
        config = SyntheticConfig(**fields)
        volumes = data_mod.generate(config)
    except (TypeError, ValueError) as exc:
        raise CliError(f"gen-data: {exc}") from exc

    if split_spec is None:
        split_spec = {"train": len(volumes), "val": 0, "test": 0}
    _check_keys(split_spec, data_mod.SPLITS, "gen-data split")
    counts = {s: int(split_spec.get(s, 0)) for s in data_mod.SPLITS}
    if sum(counts.values()) != len(volumes):
        raise CliError(
            f"split counts {counts} do not sum to num_volumes {len(volumes)}"
        )

    paths = {s: [] for s in data_mod.SPLITS}
    i = 0
    for split in data_mod.SPLITS:
        for _ in range(counts[split]):
            p = os.path.join(out_dir, f"vol_{i:03d}.rv01")
            write_volume(volumes[i], p)
            paths[split].append(p)
            i += 1
    write_manifest(os.path.join(out_dir, "manifest.txt"), paths)
    resolved = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()}
    resolved["pair_bands"] = [list(b) for b in config.pair_bands]
    resolved["split"] = counts
    _write_resolved(out_dir, resolved)
    _progress(f"wrote {len(volumes)} volumes and manifest to {out_dir}")
    return 0


TRAIN_KEYS = ("model", "data_manifest", "schedule", "train_seed")


def cmd_train(cfg, out_dir, seed_override):
    _check_keys(cfg, TRAIN_KEYS, "train")
    model_cfg = _model_config(_require(cfg, "model", "train"))
    sched = _schedule(cfg.get("schedule", {}))
    dataset = _dataset(_require(cfg, "data_manifest", "train"))
    seed = seed_override if seed_override is not None else int(cfg.get("train_seed", 0))

    model = build_model(model_cfg, seed=seed)
    _progress(f"training location_mode={model_cfg.location_mode} for "
              f"{sched.iterations} iterations (seed {seed})")
    log = train(model, dataset, sched, seed=seed)
    save_checkpoint(model, os.path.join(out_dir, "checkpoint.bin"))
    log.to_csv(os.path.join(out_dir, "curves.csv"))
    resolved = {"model": asdict(model_cfg), "schedule": _schedule_dict(sched),
                "data_manifest": cfg["data_manifest"], "train_seed": seed}
    _write_resolved(out_dir, resolved)
    final = log.final_val_dice()
    _progress(f"final val dice: {final}")
    return 0


def _schedule_dict(sched):
    d = asdict(sched)
    d["patch_shape"] = list(sched.patch_shape)
    return d


EVAL_KEYS = ("checkpoint", "data_manifest", "split", "patch_shape", "overlap",
             "shift_fraction")


def _write_report_csv(path, reports, volumes_names, num_fg):
    classes = list(range(1, num_fg + 1))
    with open(path, "w") as f:
        f.write("volume," + ",".join(f"dice_class_{k}" for k in classes) + ",mean\n")
        for name, rep in zip(volumes_names, reports):
            cells = [("" if rep.per_class[k] is None else repr(rep.per_class[k]))
                     for k in classes]
            mean = "" if rep.mean is None else repr(rep.mean)
            f.write(f"{name}," + ",".join(cells) + f",{mean}\n")
        agg = eval_mod.aggregate_mean(reports)
        f.write("aggregate," + "," * (len(classes) - 1) +
                ("," if classes else "") + ("" if agg is None else repr(agg)) + "\n")


def cmd_eval(cfg, out_dir, seed_override):
    _check_keys(cfg, EVAL_KEYS, "eval")
    ckpt = _require(cfg, "checkpoint", "eval")
    if not os.path.exists(ckpt):
        raise CliError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    dataset = _dataset(_require(cfg, "data_manifest", "eval"))
    split = cfg.get("split", "val")
    volumes = dataset.split(split)
    if not volumes:
        raise CliError(f"split {split!r} is empty")
    patch_shape = _tuple3(_require(cfg, "patch_shape", "eval"), "patch_shape")
    overlap = float(cfg.get("overlap", 0.5))
    shift = float(cfg.get("shift_fraction", 0.0))
    num_fg = model.config.num_classes - 1
    _progress(f"evaluating {len(volumes)} {split} volumes "
              f"(overlap {overlap}, shift {shift})")
    mean, reports = eval_mod.evaluate_volumes(model, volumes, patch_shape, num_fg,
                                              overlap=overlap, shift_fraction=shift)
    names = [f"{split}_{i:03d}" for i in range(len(volumes))]
    _write_report_csv(os.path.join(out_dir, "dice_report.csv"), reports, names, num_fg)
    _write_resolved(out_dir, {"checkpoint": ckpt, "data_manifest": cfg["data_manifest"],
                              "split": split, "patch_shape": list(patch_shape),
                              "overlap": overlap, "shift_fraction": shift})
    _progress(f"aggregate mean dice: {mean}")
    return 0


POST_KEYS = ("mode", "checkpoint", "data_manifest", "split", "patch_shape", "overlap",
             "connectivity", "radii", "reference_shape", "common_fov")


def cmd_postprocess(cfg, out_dir, seed_override):
    _check_keys(cfg, POST_KEYS, "postprocess")
    mode = _require(cfg, "mode", "postprocess")
    if mode not in ("lcf", "atlas"):
        raise CliError(f"postprocess mode must be 'lcf' or 'atlas', got {mode!r}")
    ckpt = _require(cfg, "checkpoint", "postprocess")
    if not os.path.exists(ckpt):
        raise CliError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    num_fg = model.config.num_classes - 1
    dataset = _dataset(_require(cfg, "data_manifest", "postprocess"))
    split = cfg.get("split", "test")
    volumes = dataset.split(split)
    if not volumes:
        raise CliError(f"split {split!r} is empty")
    patch_shape = _tuple3(_require(cfg, "patch_shape", "postprocess"), "patch_shape")
    overlap = float(cfg.get("overlap", 0.5))
    if mode == "atlas" and not cfg.get("common_fov", False):
        raise CliError(
            "atlas masking requires volumes with a shared field of view; "
            "set \"common_fov\": true to declare it"
        )

    def predict(vols, what):
        out = []
        for i, vol in enumerate(vols):
            _progress(f"predicting {what} volume {i + 1}/{len(vols)}")
            out.append(eval_mod.sliding_window_predict(model, vol, patch_shape,
                                                       overlap=overlap))
        return out

    preds = predict(volumes, split)

    if mode == "lcf":
        connectivity = int(cfg.get("connectivity", 26))
        filtered = [post_mod.largest_component_filter(p, range(1, num_fg + 1),
                                                      connectivity) for p in preds]
    else:
        train_vols = dataset.split("train")
        val_vols = dataset.split("val")
        if not train_vols or not val_vols:
            raise CliError("atlas mode needs train (atlas) and val (radius) splits")
        if cfg.get("reference_shape") is not None:
            ref_shape = _tuple3(cfg["reference_shape"], "reference_shape")
        else:
            ref_shape = tuple(int(np.median([v.shape[i] for v in train_vols]))
                              for i in range(3))
        radii = [int(r) for r in cfg.get("radii", [0, 1, 2, 3, 4, 5])]
        atlas = post_mod.build_atlas([v.labels for v in train_vols], ref_shape, num_fg)
        val_preds = predict(val_vols, "val")
        radius = post_mod.optimize_dilation(atlas, val_preds,
                                            [v.labels for v in val_vols], radii)
        atlas.dilation_radius = radius
        _progress(f"selected dilation radius {radius} on val")
        post_mod.save_atlas(atlas, os.path.join(out_dir, "atlas"))
        filtered = [post_mod.atlas_mask(p, atlas) for p in preds]

    names = []
    for i, (vol, lab) in enumerate(zip(volumes, filtered)):
        name = f"filtered_{i:03d}.rv01"
        write_volume(Volume(intensities=vol.intensities, spacing=vol.spacing,
                            labels=lab.astype(np.uint8), bpr_map=vol.bpr_map),
                     os.path.join(out_dir, name))
        names.append(name)

    before = [eval_mod.DiceReport.from_labelmaps(p, v.labels, num_fg)
              for p, v in zip(preds, volumes)]
    after = [eval_mod.DiceReport.from_labelmaps(p, v.labels, num_fg)
             for p, v in zip(filtered, volumes)]
    _write_report_csv(os.path.join(out_dir, "report_raw.csv"), before, names, num_fg)
    _write_report_csv(os.path.join(out_dir, "report_filtered.csv"), after, names, num_fg)
    resolved = {k: cfg.get(k) for k in POST_KEYS if k in cfg}
    resolved.update({"mode": mode, "split": split, "overlap": overlap,
                     "patch_shape": list(patch_shape)})
    _write_resolved(out_dir, resolved)
    _progress(f"mean dice raw {eval_mod.aggregate_mean(before)} -> "
              f"filtered {eval_mod.aggregate_mean(after)}")
    return 0


SWEEP_KEYS = ("axis", "data_manifest", "model", "schedule", "patch_shapes", "modes",
              "seeds", "checkpoints", "split", "patch_shape", "overlap", "fractions")


def cmd_sweep(cfg, out_dir, seed_override, threads):
    _check_keys(cfg, SWEEP_KEYS, "sweep")
    axis = _require(cfg, "axis", "sweep")
    dataset = _dataset(_require(cfg, "data_manifest", "sweep"))

    if axis == "ptvc":
        model_cfg = _model_config(_require(cfg, "model", "sweep"))
        sched = _schedule(cfg.get("schedule", {}))
        patch_shapes = [_tuple3(p, "patch_shapes entry")
                        for p in _require(cfg, "patch_shapes", "sweep")]
        modes = tuple(cfg.get("modes", ["none", "locbam"]))
        seeds = [int(s) for s in cfg.get("seeds", [0])]
        result, errors = ptvc_sweep(dataset, model_cfg, sched, patch_shapes, seeds,
                                    modes=modes, threads=threads, progress=_progress)
        result.to_csv(os.path.join(out_dir, "sweep.csv"))
        _write_resolved(out_dir, {
            "axis": "ptvc", "data_manifest": cfg["data_manifest"],
            "model": asdict(model_cfg), "schedule": _schedule_dict(sched),
            "patch_shapes": [list(p) for p in patch_shapes],
            "modes": list(modes), "seeds": seeds,
        })
        _progress(result.format_table())
        if errors:
            for cell, exc in errors.items():
                _progress(f"cell {cell} failed: {exc}")
            return 2
        return 0

    if axis == "shift":
        ckpts = _require(cfg, "checkpoints", "sweep")
        if not isinstance(ckpts, dict) or not ckpts:
            raise CliError("sweep.checkpoints must map labels to checkpoint paths")
        split = cfg.get("split", "test")
        volumes = dataset.split(split)
        if not volumes:
            raise CliError(f"split {split!r} is empty")
        patch_shape = _tuple3(_require(cfg, "patch_shape", "sweep"), "patch_shape")
        overlap = float(cfg.get("overlap", 0.5))
        fractions = [float(x) for x in cfg.get("fractions", eval_mod.SHIFT_FRACTIONS)]
        merged = None
        for label in sorted(ckpts):
            path = ckpts[label]
            if not os.path.exists(path):
                raise CliError(f"checkpoint not found: {path}")
            model = load_checkpoint(path)
            _progress(f"shift sweep for {label} ({model.config.location_mode})")
            res = eval_mod.shift_sweep(model, volumes, patch_shape,
                                       model.config.num_classes - 1,
                                       fractions=fractions, overlap=overlap)
            if merged is None:
                merged = eval_mod.SweepResult(columns=["model"] + res.columns)
            for row in res.rows:
                merged.add({"model": label, **row})
        merged.to_csv(os.path.join(out_dir, "sweep.csv"))
        _write_resolved(out_dir, {
            "axis": "shift", "data_manifest": cfg["data_manifest"],
            "checkpoints": dict(ckpts), "split": split,
            "patch_shape": list(patch_shape), "overlap": overlap,
            "fractions": fractions,
        })
        _progress(merged.format_table())
        return 0

    raise CliError(f"sweep axis must be 'ptvc' or 'shift', got {axis!r}")


def cmd_gradcheck():
    from .gradcheck import run_op_suite

    ok = True
    print("op                  precision  max_rel_err  tolerance  status")
    for dtype, eps, tol in ((np.float32, 1e-3, 1e-3), (np.float64, 1e-5, 1e-6)):
        rows = run_op_suite(seeds=range(3), dtype=dtype, eps=eps, tol=tol)
        name = np.dtype(dtype).name
        for op_name, err, passed in rows:
            ok = ok and passed
            status = "pass" if passed else "FAIL"
            print(f"{op_name:<18s}  {name:<9s}  {err:<11.3e}  {tol:<9g}  {status}")
    return 0 if ok else 1


# -- argument parsing ---------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="locseg",
        description="Location-aware patch-based 3D segmentation workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_out in (("gen-data", True), ("train", True), ("eval", True),
                            ("postprocess", True), ("sweep", True)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=needs_out, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        if name == "sweep":
            p.add_argument("--threads", type=int, default=1,
                           help="worker threads for independent cells")
    sub.add_parser("gradcheck")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck()
        cfg = _load_config(args.config)
        os.makedirs(args.out, exist_ok=True)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.out, args.seed)
        if args.command == "train":
            return cmd_train(cfg, args.out, args.seed)
        if args.command == "eval":
            return cmd_eval(cfg, args.out, args.seed)
        if args.command == "postprocess":
            return cmd_postprocess(cfg, args.out, args.seed)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.out, args.seed, args.threads)
        raise CliError(f"unknown command {args.command!r}")
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
