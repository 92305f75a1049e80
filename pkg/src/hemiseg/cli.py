"""Command-line pipeline: phantom, train, segment, evaluate, midline,
biomarker, gridsearch.

Every subcommand resolves its settings as defaults <- YAML --config file <-
explicit flags, echoes the resolved config to <out>/config.json, and writes
a deterministic run.log next to its outputs.  Exit codes: 0 success, 1 usage
error, 2 data/validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np
import yaml

from . import figures
from .analysis import (biomarker_analysis, gridsearch, midline_dice,
                       write_biomarker_report, write_gridsearch_table,
                       write_midline_report)
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import evaluate_volume, write_metric_report
from .model import NetworkConfig, ensemble_predict, segment
from .nifti import read_labels, read_volume, write_labels, write_volume
from .optim import TrainConfig, train_ensemble, write_history
from .phantom import PhantomParams, generate_phantom
from .volumes import ManifestEntry, read_manifest, split_dataset, write_manifest


class _UsageError(Exception):
    pass


PHANTOM_DEFAULTS = {
    "out": "phantom_out",
    "count": 4,
    "seed": 0,
    "group": "phantom",
    "extents": [32, 64, 64],
    "spacing": [1.0, 0.117, 0.117],
    "ipsi_mean": 1.0,
    "contra_mean": 0.8,
    "hemisphere_sigma": 0.05,
    "background_mean": 0.0,
    "lesion_radius_lo": 3.0,
    "lesion_radius_hi": 6.0,
    "lesion_shift": 0.6,
    "lesion_probability": 0.7,
    "noise_sigma": 0.05,
}

TRAIN_DEFAULTS = {
    "manifest": None,
    "out": "train_out",
    "train_per_group": 3,
    "val_per_group": 1,
    "seed": 0,
    "epochs": 300,
    "learning_rate": 1e-5,
    "beta1": 0.9,
    "beta2": 0.999,
    "epsilon": 1e-8,
    "ensemble_size": 3,
    "clamp_floor": 1e-7,
    "checkpoint_rule": "best_val",
    "filter_rate": 1.0,
    "base_filters": 32,
    "aspp_dilation_rates": [2, 4, 6],
}

SEGMENT_DEFAULTS = {
    "manifest": None,
    "model_dir": None,
    "out": "segment_out",
}

EVALUATE_DEFAULTS = {
    "pred_manifest": None,
    "gt_manifest": None,
    "out": "evaluate_out",
    "slices": "",
}

MIDLINE_DEFAULTS = {
    "pred_manifest": None,
    "gt_manifest": None,
    "out": "midline_out",
    "max_n": 10,
    "slices": "",
}

BIOMARKER_DEFAULTS = {
    "pred_manifest": None,
    "gt_manifest": None,
    "out": "biomarker_out",
    "resamples": 10000,
    "alpha": 0.05,
    "seed": 0,
    "paired": False,
}

GRIDSEARCH_DEFAULTS = {
    "manifest": None,
    "out": "gridsearch_out",
}


def _load_config_file(path: str, known: dict) -> dict:
    try:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise _UsageError(f"could not parse config file {path}: {exc}") from exc
    except OSError as exc:
        raise _UsageError(f"could not read config file {path}: {exc}") from exc
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise _UsageError(f"config file {path} must hold a key/value mapping")
    unknown = sorted(set(loaded) - set(known))
    if unknown:
        raise _UsageError(f"unknown config keys in {path}: {unknown} "
                          f"(expected a subset of {sorted(known)})")
    return loaded


def _resolve(defaults: dict, args: argparse.Namespace) -> dict:
    resolved = dict(defaults)
    if args.config:
        resolved.update(_load_config_file(args.config, defaults))
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _require(resolved: dict, *keys: str) -> None:
    missing = [k for k in keys if resolved[k] in (None, "")]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise _UsageError(f"missing required settings: {flags} "
                          "(flag or config key)")


def _start_run(command: str, resolved: dict) -> str:
    out = resolved["out"]
    os.makedirs(out, exist_ok=True)
    echo = {"command": command}
    for key, value in resolved.items():
        echo[key] = list(value) if isinstance(value, tuple) else value
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def _write_log(out: str, lines: list[str]) -> None:
    with open(os.path.join(out, "run.log"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_slices(text: str):
    """'2,5,8-10' -> {2, 5, 8, 9, 10}; empty/blank means no filtering."""
    text = (text or "").strip()
    if not text:
        return None
    chosen = set()
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, _, hi = part.partition("-")
            try:
                lo_i, hi_i = int(lo), int(hi)
            except ValueError:
                raise _UsageError(f"bad slice range {part!r}") from None
            if lo_i > hi_i:
                raise _UsageError(f"bad slice range {part!r}")
            chosen.update(range(lo_i, hi_i + 1))
        else:
            try:
                chosen.add(int(part))
            except ValueError:
                raise _UsageError(f"bad slice index {part!r}") from None
    return chosen


def _aligned_pairs(pred_manifest: str, gt_manifest: str):
    preds = read_manifest(pred_manifest)
    gts = read_manifest(gt_manifest)
    for name, entries in (("prediction", preds), ("ground-truth", gts)):
        ids = [e.id for e in entries]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate ids in {name} manifest: {dupes}")
    pred_map = {e.id: e for e in preds}
    gt_map = {e.id: e for e in gts}
    only_pred = sorted(set(pred_map) - set(gt_map))
    only_gt = sorted(set(gt_map) - set(pred_map))
    if only_pred or only_gt:
        raise ValueError(
            f"manifest ids do not match; without ground truth: {only_pred}; "
            f"without prediction: {only_gt}"
        )
    return [(e, gt_map[e.id]) for e in preds]


def cmd_phantom(args) -> None:
    resolved = _resolve(PHANTOM_DEFAULTS, args)
    out = _start_run("phantom", resolved)
    count = int(resolved["count"])
    if count < 1:
        raise _UsageError(f"count must be >= 1, got {count}")
    entries = []
    lines = [f"generating {count} phantoms into {out}"]
    for k in range(count):
        params = PhantomParams(
            extents=tuple(resolved["extents"]),
            spacing=tuple(resolved["spacing"]),
            ipsi_mean=resolved["ipsi_mean"],
            contra_mean=resolved["contra_mean"],
            hemisphere_sigma=resolved["hemisphere_sigma"],
            background_mean=resolved["background_mean"],
            lesion_radius_range=(resolved["lesion_radius_lo"],
                                 resolved["lesion_radius_hi"]),
            lesion_intensity_shift=resolved["lesion_shift"],
            lesion_probability=resolved["lesion_probability"],
            noise_sigma=resolved["noise_sigma"],
            seed=int(resolved["seed"]) + k,
        )
        grid, labels = generate_phantom(params)
        vid = f"p{k:04d}"
        vol_path = os.path.join(out, f"{vid}_vol.nii")
        lab_path = os.path.join(out, f"{vid}_lab.nii")
        write_volume(grid, vol_path)
        write_labels(labels, lab_path)
        entries.append(ManifestEntry(id=vid, group=resolved["group"],
                                     volume_path=vol_path, labels_path=lab_path))
        counts = np.bincount(labels.labels.ravel(), minlength=3)
        lines.append(f"{vid}: class voxels {counts[0]}/{counts[1]}/{counts[2]}")
    write_manifest(entries, os.path.join(out, "manifest.csv"))
    _write_log(out, lines)


def _load_pairs(entries):
    return [(read_volume(e.volume_path), read_labels(e.labels_path))
            for e in entries]


def cmd_train(args) -> None:
    resolved = _resolve(TRAIN_DEFAULTS, args)
    _require(resolved, "manifest")
    out = _start_run("train", resolved)
    entries = read_manifest(resolved["manifest"])
    train_e, val_e, test_e = split_dataset(
        entries, int(resolved["train_per_group"]),
        int(resolved["val_per_group"]), seed=int(resolved["seed"]))
    for name, subset in (("train", train_e), ("val", val_e), ("test", test_e)):
        if subset:
            write_manifest(subset, os.path.join(out, f"split_{name}.csv"))
    net_config = NetworkConfig(
        filter_rate=float(resolved["filter_rate"]),
        base_filters=int(resolved["base_filters"]),
        aspp_dilation_rates=tuple(int(r) for r in resolved["aspp_dilation_rates"]),
        seed=int(resolved["seed"]),
    )
    train_cfg = TrainConfig(
        learning_rate=float(resolved["learning_rate"]),
        beta1=float(resolved["beta1"]),
        beta2=float(resolved["beta2"]),
        epsilon=float(resolved["epsilon"]),
        epochs=int(resolved["epochs"]),
        seed=int(resolved["seed"]),
        ensemble_size=int(resolved["ensemble_size"]),
        clamp_floor=float(resolved["clamp_floor"]),
        checkpoint_rule=resolved["checkpoint_rule"],
    )
    train_pairs = _load_pairs(train_e)
    val_pairs = _load_pairs(val_e)
    members = train_ensemble(net_config, train_pairs, val_pairs, train_cfg)
    lines = [
        f"parameter count: {members[0][0].parameter_count()}",
        f"train ids: {' '.join(e.id for e in train_e)}",
        f"val ids: {' '.join(e.id for e in val_e)}",
        f"test ids: {' '.join(e.id for e in test_e)}",
    ]
    for k, (model, history) in enumerate(members):
        save_checkpoint(model, os.path.join(out, f"model_{k}.ckpt"))
        write_history(history, os.path.join(out, f"history_{k}.csv"))
        final_train = history[-1]["train_loss"]
        if val_pairs:
            best = min(history, key=lambda row: row["val_loss"])
            lines.append(f"member {k}: final train loss {final_train:.8f}, "
                         f"best val loss {best['val_loss']:.8f} "
                         f"at epoch {best['epoch']}")
        else:
            lines.append(f"member {k}: final train loss {final_train:.8f}")
    figures.training_curves([h for _, h in members],
                            os.path.join(out, "training_curves.png"))
    _write_log(out, lines)


def cmd_segment(args) -> None:
    resolved = _resolve(SEGMENT_DEFAULTS, args)
    _require(resolved, "manifest", "model_dir")
    out = _start_run("segment", resolved)
    pattern = os.path.join(resolved["model_dir"], "model_*.ckpt")
    ckpt_paths = sorted(glob.glob(pattern))
    if not ckpt_paths:
        raise ValueError(f"no checkpoints matching {pattern}")
    models = [load_checkpoint(p) for p in ckpt_paths]
    entries = read_manifest(resolved["manifest"])
    lines = [f"loaded {len(models)} checkpoint(s) from {resolved['model_dir']}"]
    pred_entries = []
    for e in entries:
        grid = read_volume(e.volume_path)
        if len(models) == 1:
            pred = segment(models[0], grid)
        else:
            pred = ensemble_predict(models, grid)
        pred.meta = grid.meta
        pred_path = os.path.join(out, f"pred_{e.id}.nii")
        write_labels(pred, pred_path)
        pred_entries.append(ManifestEntry(id=e.id, group=e.group,
                                          volume_path=e.volume_path,
                                          labels_path=pred_path))
        counts = np.bincount(pred.labels.ravel(), minlength=3)
        lines.append(f"{e.id}: predicted class voxels "
                     f"{counts[0]}/{counts[1]}/{counts[2]}")
    write_manifest(pred_entries, os.path.join(out, "pred_manifest.csv"))
    _write_log(out, lines)


def cmd_evaluate(args) -> None:
    resolved = _resolve(EVALUATE_DEFAULTS, args)
    _require(resolved, "pred_manifest", "gt_manifest")
    out = _start_run("evaluate", resolved)
    slice_filter = _parse_slices(resolved["slices"])
    pairs = _aligned_pairs(resolved["pred_manifest"], resolved["gt_manifest"])
    rows = []
    for pred_e, gt_e in pairs:
        pred = read_labels(pred_e.labels_path)
        gt = read_labels(gt_e.labels_path)
        for row in evaluate_volume(pred, gt, slice_filter):
            rows.append((pred_e.id, row))
    write_metric_report(rows, os.path.join(out, "metrics.csv"))
    figures.metric_boxplots(rows, os.path.join(out, "metrics.png"))
    lines = []
    for region in ("brain", "contralateral_hemisphere"):
        vals = [r.dice for _, r in rows if r.region == region]
        lines.append(f"mean {region} dice: {np.mean(vals):.6f} over {len(vals)} volumes")
    _write_log(out, lines)


def cmd_midline(args) -> None:
    resolved = _resolve(MIDLINE_DEFAULTS, args)
    _require(resolved, "pred_manifest", "gt_manifest")
    out = _start_run("midline", resolved)
    slice_filter = _parse_slices(resolved["slices"])
    max_n = int(resolved["max_n"])
    if max_n < 1:
        raise _UsageError(f"max_n must be >= 1, got {max_n}")
    pairs = _aligned_pairs(resolved["pred_manifest"], resolved["gt_manifest"])
    volumes = [(read_labels(p.labels_path), read_labels(g.labels_path))
               for p, g in pairs]
    report_rows = []
    for n in range(1, max_n + 1):
        scores = [midline_dice(pred, gt, n, slice_filter) for pred, gt in volumes]
        report_rows.append((n,
                            float(np.mean([s[0] for s in scores])),
                            float(np.mean([s[1] for s in scores]))))
    write_midline_report(report_rows, os.path.join(out, "midline.csv"))
    figures.midline_curve(report_rows, os.path.join(out, "midline.png"))
    lines = [f"n={n}: ipsi {di:.6f}, contra {dc:.6f}"
             for n, di, dc in report_rows]
    _write_log(out, lines)


def cmd_biomarker(args) -> None:
    resolved = _resolve(BIOMARKER_DEFAULTS, args)
    _require(resolved, "pred_manifest", "gt_manifest")
    out = _start_run("biomarker", resolved)
    pairs = _aligned_pairs(resolved["pred_manifest"], resolved["gt_manifest"])
    preds = [read_labels(p.labels_path) for p, _ in pairs]
    gts = [read_labels(g.labels_path) for _, g in pairs]
    result = biomarker_analysis(
        preds, gts, resamples=int(resolved["resamples"]),
        alpha=float(resolved["alpha"]), seed=int(resolved["seed"]),
        paired=bool(resolved["paired"]))
    write_biomarker_report(result, os.path.join(out, "biomarker.csv"))
    figures.ratio_scatter(result, os.path.join(out, "biomarker.png"))
    lines = [
        f"volumes: {result.n_volumes}",
        f"cohens d: {result.cohens_d:.6f}",
        f"{100 * (1 - result.alpha):g}% CI: "
        f"[{result.ci_low:.6f}, {result.ci_high:.6f}]",
    ]
    if result.degenerate:
        lines.append("warning: degenerate bootstrap distribution, "
                     "interval collapsed to the point estimate")
    _write_log(out, lines)


def cmd_gridsearch(args) -> None:
    resolved = _resolve(GRIDSEARCH_DEFAULTS, args)
    _require(resolved, "manifest")
    out = _start_run("gridsearch", resolved)
    entries = read_manifest(resolved["manifest"])
    pairs = _load_pairs(entries)
    result = gridsearch(pairs)
    write_gridsearch_table(result, os.path.join(out, "gridsearch.csv"))
    figures.gridsearch_heatmap(result, os.path.join(out, "gridsearch.png"))
    _write_log(out, [
        f"grid cells: {result.scores.size}",
        f"best percentile index: {result.best_percentile_index}",
        f"best alpha: {result.best_alpha}",
        f"best mean dice: {result.best_mean_dice:.6f}",
    ])


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="YAML file with config keys")
    sub.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hemiseg",
        description="Cerebral hemisphere segmentation pipeline")
    subs = parser.add_subparsers(dest="command")

    p = subs.add_parser("phantom", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--group")
    p.add_argument("--extents", type=int, nargs=3, metavar=("D", "H", "W"))
    p.add_argument("--spacing", type=float, nargs=3, metavar=("SD", "SH", "SW"))
    p.add_argument("--ipsi-mean", type=float)
    p.add_argument("--contra-mean", type=float)
    p.add_argument("--lesion-probability", type=float)
    p.add_argument("--lesion-shift", type=float)
    p.add_argument("--noise-sigma", type=float)
    p.set_defaults(func=cmd_phantom)

    p = subs.add_parser("train", help="train the segmentation ensemble")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--train-per-group", type=int)
    p.add_argument("--val-per-group", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--ensemble-size", type=int)
    p.add_argument("--filter-rate", type=float)
    p.add_argument("--base-filters", type=int)
    p.add_argument("--checkpoint-rule", choices=["best_val", "last"])
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("segment", help="segment volumes with trained models")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--model-dir")
    p.set_defaults(func=cmd_segment)

    p = subs.add_parser("evaluate", help="segmentation metrics report")
    _add_common(p)
    p.add_argument("--pred-manifest")
    p.add_argument("--gt-manifest")
    p.add_argument("--slices", help="through-plane slices to keep, e.g. 2,5,8-12")
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser("midline", help="midline-band Dice report")
    _add_common(p)
    p.add_argument("--pred-manifest")
    p.add_argument("--gt-manifest")
    p.add_argument("--max-n", type=int)
    p.add_argument("--slices")
    p.set_defaults(func=cmd_midline)

    p = subs.add_parser("biomarker", help="hemispheric-ratio effect size")
    _add_common(p)
    p.add_argument("--pred-manifest")
    p.add_argument("--gt-manifest")
    p.add_argument("--resamples", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--paired", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=cmd_biomarker)

    p = subs.add_parser("gridsearch", help="baseline threshold grid search")
    _add_common(p)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_gridsearch)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse reports usage problems with code 2; remap to 1
        return 0 if exc.code == 0 else 1
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
