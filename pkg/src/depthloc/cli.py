"""Command-line interface: phantom gen, depth sim, train, evaluate, scaling.

All commands share a JSON run configuration with four sections (phantom,
pipeline, train, eval); missing keys fall back to package defaults and
command-line flags win over the file. A SHA-256 digest of the effective
configuration is embedded in every provenance output so results can be
traced back to their exact settings.

Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, phantom, report
from .depthsim import PipelineConfig, simulate_case
from .metrics import (
    evaluate_cases,
    per_case_mean_dice,
    wilcoxon_signed_rank,
    write_aggregate_json,
    write_report_csv,
)
from .net import ArchSpec, masks_from_logits, predict_logits
from .train import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train_loop
from .voldata import (
    ORGAN_NAMES,
    GridInvariantError,
    read_depth,
    read_maskstack,
    write_depth,
    write_maskstack,
)

DEFAULT_RUN_CONFIG = {
    "phantom": {
        "n": 250,
        "master_seed": 20260815,
        "dims": [96, 48, 192],
        "spacing_mm": [4.0, 4.0, 4.0],
    },
    "pipeline": {
        "binarize_threshold": 0.02,
        "far_suppress_threshold": 0.3,
        "binary_opening_radius": 1,
        "gray_opening_radius": 1,
    },
    "train": {
        "batch_size": 8,
        "total_steps": 500,
        "base_lr": 0.002,
        "eta_min": 0.0,
        "dice_weight": 0.5,
        "bce_weight": 0.5,
        "dice_epsilon": 1.0,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "rng_seed": 1,
    },
    "eval": {
        "train_fraction": 0.8,
        "eval_fraction": 0.2,
        "figures": True,
    },
}

SIM_MANIFEST_FIELDS = ("case_id", "depth", "masks")


class ConfigFileError(ValueError):
    """The run configuration file is malformed or holds unknown keys."""


def load_run_config(path=None):
    """Package defaults deep-merged with an optional JSON config file."""

    cfg = copy.deepcopy(DEFAULT_RUN_CONFIG)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigFileError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(loaded, dict):
            raise ConfigFileError(f"{path}: top level must be an object")
        for section, values in loaded.items():
            if section not in cfg:
                raise ConfigFileError(f"{path}: unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ConfigFileError(f"{path}: section {section!r} must be an object")
            for key, value in values.items():
                if key not in cfg[section]:
                    raise ConfigFileError(
                        f"{path}: unknown key {section}.{key}"
                    )
                cfg[section][key] = value
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg):
    ph = cfg["phantom"]
    if int(ph["n"]) < 1:
        raise ConfigFileError("phantom.n must be positive")
    if len(ph["dims"]) != 3 or any(int(d) < 1 for d in ph["dims"]):
        raise ConfigFileError("phantom.dims must be three positive integers")
    if len(ph["spacing_mm"]) != 3 or any(float(s) <= 0 for s in ph["spacing_mm"]):
        raise ConfigFileError("phantom.spacing_mm must be three positive numbers")
    ev = cfg["eval"]
    tf, ef = float(ev["train_fraction"]), float(ev["eval_fraction"])
    if not (0.0 < tf < 1.0 and 0.0 < ef < 1.0 and tf + ef <= 1.0):
        raise ConfigFileError("split fractions must lie in (0, 1) and sum to at most 1")
    # Constructing the section objects validates the remaining fields.
    pipeline_config(cfg)
    train_config(cfg)


def pipeline_config(cfg):
    return PipelineConfig(**cfg["pipeline"])


def train_config(cfg):
    return TrainConfig(**cfg["train"])


def config_digest(cfg):
    """SHA-256 over the canonical JSON form of the effective config."""

    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def _parse_triple(text, kind):
    parts = text.split(",")
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ConfigFileError(f"expected one or three comma-separated {kind} values")
    return parts


def cmd_phantom_gen(args):
    cfg = load_run_config(args.config)
    if args.n is not None:
        cfg["phantom"]["n"] = args.n
    if args.seed is not None:
        cfg["phantom"]["master_seed"] = args.seed
    if args.dims is not None:
        cfg["phantom"]["dims"] = [int(v) for v in _parse_triple(args.dims, "dim")]
    if args.spacing is not None:
        cfg["phantom"]["spacing_mm"] = [
            float(v) for v in _parse_triple(args.spacing, "spacing")
        ]
    validate_run_config(cfg)
    ph = cfg["phantom"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = phantom.generate_cohort(
        out,
        n=int(ph["n"]),
        master_seed=int(ph["master_seed"]),
        dims=tuple(int(d) for d in ph["dims"]),
        spacing=tuple(float(s) for s in ph["spacing_mm"]),
    )
    _write_json(
        out / "gen.json",
        {
            "config_digest": config_digest(cfg),
            "n": int(ph["n"]),
            "master_seed": int(ph["master_seed"]),
            "dims": [int(d) for d in ph["dims"]],
            "spacing_mm": [float(s) for s in ph["spacing_mm"]],
            "version": __version__,
        },
    )
    print(f"generated {len(rows)} cases in {out}")
    return 0


def depth_filename(case_id):
    return f"{case_id}_depth.ddep"


def masks_filename(case_id):
    return f"{case_id}_masks.dmsk"


def cmd_depth_sim(args):
    cfg = load_run_config(args.config)
    overrides = {
        "binarize_threshold": args.binarize_threshold,
        "far_suppress_threshold": args.far_threshold,
        "binary_opening_radius": args.binary_opening_radius,
        "gray_opening_radius": args.gray_opening_radius,
    }
    for key, value in overrides.items():
        if value is not None:
            cfg["pipeline"][key] = value
    validate_run_config(cfg)
    pipeline = pipeline_config(cfg)

    manifest_path = Path(args.manifest)
    case_dir = manifest_path.parent
    rows = phantom.read_manifest(manifest_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    sim_rows = []
    failures = []
    for row in rows:
        cid = row["case_id"]
        try:
            case = phantom.read_case(case_dir, cid)
            depth, masks = simulate_case(case, pipeline)
            write_depth(out / depth_filename(cid), depth)
            write_maskstack(out / masks_filename(cid), masks)
            sim_rows.append(
                {
                    "case_id": cid,
                    "depth": depth_filename(cid),
                    "masks": masks_filename(cid),
                }
            )
        except (ValueError, OSError) as exc:
            failures.append((cid, exc))

    with open(out / "sim_manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SIM_MANIFEST_FIELDS)
        writer.writeheader()
        writer.writerows(sim_rows)
    _write_json(
        out / "pipeline.json",
        {
            "binarize_threshold": pipeline.binarize_threshold,
            "far_suppress_threshold": pipeline.far_suppress_threshold,
            "binary_opening_radius": pipeline.binary_opening_radius,
            "gray_opening_radius": pipeline.gray_opening_radius,
            "config_digest": config_digest(cfg),
            "version": __version__,
        },
    )
    print(f"simulated {len(sim_rows)} of {len(rows)} cases into {out}")
    if failures:
        for cid, exc in failures:
            print(f"error: {cid}: {exc}", file=sys.stderr)
        return 1
    return 0


def read_sim_manifest(data_dir):
    data_dir = Path(data_dir)
    path = data_dir / "sim_manifest.csv"
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != SIM_MANIFEST_FIELDS:
            raise GridInvariantError(f"{path}: unexpected manifest columns")
        return [dict(row) for row in reader]


def load_sim_cases(data_dir, rows):
    """Load depth/target arrays for manifest rows.

    Returns (case_ids, depths (N, H, W) float32, targets (N, C, H, W)
    uint8, stacks, spacing).
    """

    data_dir = Path(data_dir)
    case_ids, depth_arrays, target_arrays, stacks = [], [], [], []
    ref_dims = None
    spacing = None
    for row in rows:
        depth = read_depth(data_dir / row["depth"])
        stack = read_maskstack(data_dir / row["masks"])
        if stack.organ_names != ORGAN_NAMES:
            raise GridInvariantError(
                f"{row['masks']}: organ channels are not in canonical order"
            )
        if stack.dims != depth.dims or stack.spacing != depth.spacing:
            raise GridInvariantError(f"{row['case_id']}: depth and mask grids disagree")
        if ref_dims is None:
            ref_dims, spacing = depth.dims, depth.spacing
        elif depth.dims != ref_dims or depth.spacing != spacing:
            raise GridInvariantError(f"{row['case_id']}: inconsistent grids in dataset")
        case_ids.append(row["case_id"])
        depth_arrays.append(depth.values.T)
        target_arrays.append(stack.channels.transpose(0, 2, 1))
        stacks.append(stack)
    depths = np.stack(depth_arrays).astype(np.float32)
    targets = np.stack(target_arrays).astype(np.uint8)
    return case_ids, depths, targets, stacks, spacing


def split_rows(rows, cfg):
    """(train_rows, eval_rows): leading and trailing slices of the manifest."""

    n = len(rows)
    n_train = int(math.floor(n * float(cfg["eval"]["train_fraction"])))
    n_eval = int(math.floor(n * float(cfg["eval"]["eval_fraction"])))
    if n_train < 1 or n_eval < 1:
        raise GridInvariantError(
            f"dataset of {n} cases splits into {n_train} train / {n_eval} eval"
        )
    return rows[:n_train], rows[n - n_eval :]


TRAIN_LOG_FIELDS = ("step", "lr", "loss_total", "loss_dice", "loss_bce")


def write_train_log(path, log):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAIN_LOG_FIELDS)
        for row in log:
            writer.writerow(
                [
                    row.step,
                    f"{row.lr:.8e}",
                    f"{row.loss_total:.8e}",
                    f"{row.loss_dice:.8e}",
                    f"{row.loss_bce:.8e}",
                ]
            )


def _train_on_rows(data_dir, rows, cfg, out_dir):
    """Train on the given manifest rows; writes checkpoint + log into out_dir."""

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, depths, targets, _, _ = load_sim_cases(data_dir, rows)
    tc = train_config(cfg)
    arch = ArchSpec(input_hw=depths.shape[1:], n_out=targets.shape[1])
    result = train_loop(depths, targets, tc, arch=arch)
    digest = config_digest(cfg)
    ckpt = Checkpoint(
        params=result.params,
        opt_state=None,
        step=tc.total_steps,
        config_digest=digest,
    )
    save_checkpoint(out_dir / "checkpoint.dckp", ckpt)
    write_train_log(out_dir / "train_log.csv", result.log)
    _write_json(
        out_dir / "train.json",
        {
            "config_digest": digest,
            "n_train": len(rows),
            "total_steps": tc.total_steps,
            "final_loss": result.log[-1].loss_total,
            "version": __version__,
        },
    )
    return result


def cmd_train(args):
    cfg = load_run_config(args.config)
    rows = read_sim_manifest(args.data)
    train_rows, _ = split_rows(rows, cfg)
    if args.limit is not None:
        if args.limit < 1:
            raise ConfigFileError("--limit must be positive")
        train_rows = train_rows[: args.limit]
    result = _train_on_rows(args.data, train_rows, cfg, args.out)
    last = result.log[-1]
    print(
        f"trained on {len(train_rows)} cases for {last.step + 1} steps; "
        f"final loss {last.loss_total:.4f}"
    )
    return 0


def _evaluate_checkpoint(params, data_dir, rows, cfg, batch_size):
    case_ids, depths, _, stacks, spacing = load_sim_cases(data_dir, rows)
    logits = predict_logits(params, depths, chunk=batch_size)
    preds = masks_from_logits(logits, spacing)
    records, aggregate = evaluate_cases(case_ids, preds, stacks)
    return case_ids, preds, records, aggregate


def cmd_evaluate(args):
    cfg = load_run_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    rows = read_sim_manifest(args.data)
    _, eval_rows = split_rows(rows, cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    batch = train_config(cfg).batch_size
    case_ids, preds, records, aggregate = _evaluate_checkpoint(
        ckpt.params, args.data, eval_rows, cfg, batch
    )
    write_report_csv(out / "report.csv", records)

    extra = {
        "config_digest": config_digest(cfg),
        "checkpoint_digest": ckpt.config_digest,
        "n_eval": len(eval_rows),
        "version": __version__,
    }
    if args.gt_alt is not None:
        alt_dir = Path(args.gt_alt)
        alt_stacks = [read_maskstack(alt_dir / masks_filename(cid)) for cid in case_ids]
        alt_records, alt_aggregate = evaluate_cases(case_ids, preds, alt_stacks)
        write_report_csv(out / "report_alt.csv", alt_records)
        extra["alt"] = {
            "organs": {k: v for k, v in alt_aggregate.items() if k != "pooled"},
            "pooled": alt_aggregate["pooled"],
        }
    write_aggregate_json(out / "aggregate.json", aggregate, extra=extra)

    if bool(cfg["eval"]["figures"]):
        report.save_doe_boxplot(records, out / "doe_boxplot.png")
        first = eval_rows[0]
        depth = read_depth(Path(args.data) / first["depth"])
        ref = read_maskstack(Path(args.data) / first["masks"])
        report.save_case_overlay(depth, ref, preds[0], out / "overlay_case.png")

    pooled = aggregate["pooled"]
    assd_text = (
        f"{pooled['assd_mean_mm']:.2f}" if pooled["assd_mean_mm"] is not None else "n/a"
    )
    doe_text = (
        f"{pooled['doe_p95_mm']:.1f}" if pooled["doe_p95_mm"] is not None else "n/a"
    )
    print(
        f"evaluated {len(eval_rows)} cases: dice {pooled['dice_mean']:.4f} "
        f"± {pooled['dice_std']:.4f}, assd {assd_text} mm, doe95 {doe_text} mm"
    )
    return 0


SCALING_FIELDS = ("n_train", "dice_mean", "dice_std", "assd_mean", "assd_std", "doe_p95")


def cmd_scaling(args):
    cfg = load_run_config(args.config)
    sizes = sorted({int(v) for v in args.sizes.split(",")})
    if len(sizes) < 2:
        raise ConfigFileError("--sizes needs at least two distinct sizes")
    eval_n = int(args.eval_n)
    if eval_n < 5:
        raise ConfigFileError("--eval-n must be at least 5")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    total = max(sizes) + eval_n

    cohort_cfg = copy.deepcopy(cfg)
    cohort_cfg["phantom"]["n"] = total
    ph = cohort_cfg["phantom"]
    cohort_dir = out / "cohort"
    cohort_dir.mkdir(exist_ok=True)
    phantom.generate_cohort(
        cohort_dir,
        n=total,
        master_seed=int(ph["master_seed"]),
        dims=tuple(int(d) for d in ph["dims"]),
        spacing=tuple(float(s) for s in ph["spacing_mm"]),
    )

    sims_dir = out / "sims"
    sim_args = argparse.Namespace(
        config=args.config,
        manifest=cohort_dir / "manifest.csv",
        out=sims_dir,
        binarize_threshold=None,
        far_threshold=None,
        binary_opening_radius=None,
        gray_opening_radius=None,
    )
    status = cmd_depth_sim(sim_args)
    if status != 0:
        return status

    rows = read_sim_manifest(sims_dir)
    if len(rows) != total:
        raise GridInvariantError("simulation did not cover the whole cohort")
    pool_rows = rows[: total - eval_n]
    eval_rows = rows[total - eval_n :]

    batch = train_config(cfg).batch_size
    table = []
    dice_by_size = {}
    for size in sizes:
        if size > len(pool_rows):
            raise ConfigFileError(f"size {size} exceeds the training pool")
        run_dir = out / "runs" / f"n{size}"
        result = _train_on_rows(sims_dir, pool_rows[:size], cfg, run_dir)
        case_ids, _, records, aggregate = _evaluate_checkpoint(
            result.params, sims_dir, eval_rows, cfg, batch
        )
        write_report_csv(run_dir / "report.csv", records)
        write_aggregate_json(
            run_dir / "aggregate.json",
            aggregate,
            extra={"config_digest": config_digest(cfg), "n_train": size},
        )
        pooled = aggregate["pooled"]
        # summary row follows the headline-table convention: each metric is
        # averaged across the 11 organs, so doe_p95 is the across-organ mean
        # of the per-organ DOE95 values (not the pooled percentile)
        organ_doe = [
            row["doe_p95_mm"]
            for organ, row in aggregate.items()
            if organ != "pooled" and row["doe_p95_mm"] is not None
        ]
        doe_p95 = float(np.mean(organ_doe)) if organ_doe else None
        table.append(
            {
                "n_train": size,
                "dice_mean": pooled["dice_mean"],
                "dice_std": pooled["dice_std"],
                "assd_mean": pooled["assd_mean_mm"],
                "assd_std": pooled["assd_std_mm"],
                "doe_p95": doe_p95,
            }
        )
        per_case = per_case_mean_dice(records)
        dice_by_size[size] = [per_case[cid] for cid in case_ids]
        doe_text = "n/a" if doe_p95 is None else f"{doe_p95:.1f}"
        print(
            f"n_train {size}: dice {pooled['dice_mean']:.4f}, "
            f"doe95 {doe_text} mm"
        )

    with open(out / "scaling.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCALING_FIELDS)
        for row in table:
            writer.writerow(
                [row["n_train"]]
                + [
                    "" if row[k] is None else f"{row[k]:.6f}"
                    for k in SCALING_FIELDS[1:]
                ]
            )

    comparisons = []
    for small, large in zip(sizes, sizes[1:]):
        stat, p = wilcoxon_signed_rank(dice_by_size[large], dice_by_size[small])
        comparisons.append(
            {"pair": [small, large], "statistic": stat, "p_value": p}
        )
        print(f"wilcoxon {small} vs {large}: W = {stat:.1f}, p = {p:.2e}")
    _write_json(
        out / "scaling.json",
        {
            "sizes": sizes,
            "eval_n": eval_n,
            "table": table,
            "wilcoxon": comparisons,
            "config_digest": config_digest(cfg),
            "version": __version__,
        },
    )
    if bool(cfg["eval"]["figures"]):
        report.save_scaling_curves(table, out / "scaling_curves.png")
    return 0


# ---------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="depthloc",
        description="Synthetic depth-image organ localization toolkit.",
    )
    parser.add_argument("--version", action="version", version=f"depthloc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_phantom = sub.add_parser("phantom", help="phantom cohort commands")
    phantom_sub = p_phantom.add_subparsers(dest="subcommand", required=True)
    p_gen = phantom_sub.add_parser("gen", help="generate a phantom cohort")
    p_gen.add_argument("--n", type=int, help="number of cases")
    p_gen.add_argument("--seed", type=int, help="master seed")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--dims", help="grid dims as X,Y,Z")
    p_gen.add_argument("--spacing", help="voxel spacing in mm (one value or X,Y,Z)")
    p_gen.add_argument("--config", help="run config JSON")
    p_gen.set_defaults(func=cmd_phantom_gen)

    p_depth = sub.add_parser("depth", help="depth simulation commands")
    depth_sub = p_depth.add_subparsers(dest="subcommand", required=True)
    p_sim = depth_sub.add_parser("sim", help="simulate depth images for a cohort")
    p_sim.add_argument("--manifest", required=True, help="cohort manifest.csv")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--config", help="run config JSON")
    p_sim.add_argument("--binarize-threshold", type=float, dest="binarize_threshold")
    p_sim.add_argument("--far-threshold", type=float, dest="far_threshold")
    p_sim.add_argument(
        "--binary-opening-radius", type=int, dest="binary_opening_radius"
    )
    p_sim.add_argument("--gray-opening-radius", type=int, dest="gray_opening_radius")
    p_sim.set_defaults(func=cmd_depth_sim)

    p_train = sub.add_parser("train", help="train the localization network")
    p_train.add_argument("--config", required=True, help="run config JSON")
    p_train.add_argument("--data", required=True, help="directory with sim_manifest.csv")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--limit", type=int, help="train on the first N cases only")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint on the held-out split")
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint .dckp path")
    p_eval.add_argument("--data", required=True, help="directory with sim_manifest.csv")
    p_eval.add_argument("--out", required=True, help="output directory")
    p_eval.add_argument("--gt-alt", dest="gt_alt", help="second reference mask directory")
    p_eval.add_argument("--config", help="run config JSON")
    p_eval.set_defaults(func=cmd_evaluate)

    p_scale = sub.add_parser("scaling", help="dataset-size scaling study")
    p_scale.add_argument("--out", required=True, help="output directory")
    p_scale.add_argument("--sizes", default="50,200,800", help="training sizes, comma-separated")
    p_scale.add_argument("--eval-n", dest="eval_n", type=int, default=50)
    p_scale.add_argument("--config", help="run config JSON")
    p_scale.set_defaults(func=cmd_scaling)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint():
    raise SystemExit(main())
