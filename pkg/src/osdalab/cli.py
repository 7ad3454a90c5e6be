"""Command-line front door: generate | train | eval | sweep.

Every run writes a manifest first (resolved configuration, seed, artifact
paths, tool version) so a crashed run leaves the manifest plus partial
logs rather than silent corruption. Numeric CSV output uses 17
significant digits so re-parsing round-trips exactly.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NumericError
from .data import OsdaTask, SynthConfig, generate_task, load_feature_table, save_feature_table
from .networks import load_checkpoint, save_checkpoint
from .threshold import compute_threshold
from .trainer import TrainConfig, evaluate, run

OUTDIR_ENV = "OSDALAB_OUTDIR"


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _default_outdir() -> str:
    return os.environ.get(OUTDIR_ENV, ".")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="osdalab",
        description="Open-set domain adaptation training laboratory",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic task as a feature CSV")
    gen.add_argument("--common", type=int, required=True, help="number of shared classes")
    gen.add_argument("--total", type=int, required=True, help="number of target classes")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("-o", "--out", required=True, help="output CSV path")
    gen.add_argument("--dim", type=int, default=6)
    gen.add_argument("--per-class", type=int, default=40)
    gen.add_argument("--sigma", type=float, default=0.5)
    gen.add_argument("--spacing", type=float, default=3.0)
    gen.add_argument("--rotation", type=float, default=25.0)
    gen.add_argument("--translation", type=float, default=0.5)
    gen.add_argument("--spread", type=float, default=1.2)
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="pretrain and train on a task file")
    tr.add_argument("--task", required=True, help="feature CSV produced by generate")
    tr.add_argument("--seed", type=int, required=True, help="run seed (no hidden entropy)")
    tr.add_argument("--out-dir", default=None, help=f"artifact directory (default ${OUTDIR_ENV} or .)")
    _add_config_flags(tr)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint on a labeled task")
    ev.add_argument("--task", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--lambda1", type=float, default=0.5)
    ev.add_argument("--manual-h", type=float, default=None, help="override the self-tuned threshold")
    ev.add_argument("--pair-seed", type=int, default=0, help="pairing seed for the self-tuned threshold")
    ev.add_argument("--mode", choices=["commonness", "open-threshold", "open-confidence"], default="commonness")
    ev.add_argument("--out", default=None, help="also write the metrics record to this JSON file")
    ev.set_defaults(func=cmd_eval)

    sw = sub.add_parser("sweep", help="train and evaluate across class-count settings")
    sw.add_argument(
        "--pairs",
        required=True,
        help="comma list of common:total class counts, e.g. 3:4,3:6,3:12",
    )
    sw.add_argument("--seeds", required=True, help="comma list of seeds, e.g. 1,2,3")
    sw.add_argument("-o", "--out", required=True, help="aggregated CSV path")
    sw.add_argument("--dim", type=int, default=6)
    sw.add_argument("--per-class", type=int, default=40)
    _add_config_flags(sw)
    sw.set_defaults(func=cmd_sweep)
    return parser


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lambda1", type=float, default=0.5)
    parser.add_argument("--lambda2", type=float, default=0.5)
    parser.add_argument("--r", type=float, default=30.0)
    parser.add_argument("--m", type=int, default=5)
    parser.add_argument("--batch-size", type=int, default=48)
    parser.add_argument("--lr", type=float, default=0.01)
    parser.add_argument("--momentum", type=float, default=0.9)
    parser.add_argument("--weight-decay", type=float, default=5e-4)
    parser.add_argument("--gamma", type=float, default=0.001, help="learning-rate decay gamma")
    parser.add_argument("--beta-lr", type=float, default=0.75, help="learning-rate decay exponent")
    parser.add_argument("--pre-iters", type=int, default=200)
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--iters-per-epoch", type=int, default=50)
    parser.add_argument("--no-jitter", action="store_true")
    parser.add_argument("--no-adv-source-term", action="store_true")
    parser.add_argument("--no-gaux", action="store_true")
    parser.add_argument("--no-cmmc", action="store_true")
    parser.add_argument("--no-cmmc-h", action="store_true")
    parser.add_argument("--no-mixup", action="store_true")
    parser.add_argument("--beta-lambda2", action="store_true")
    parser.add_argument("--attached-weights", action="store_true")


def _config_from_args(args, seed: int) -> TrainConfig:
    return TrainConfig(
        seed=seed,
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        r=args.r,
        m=args.m,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        lr_gamma=args.gamma,
        lr_beta=args.beta_lr,
        max_pre_iter=args.pre_iters,
        max_epochs=args.epochs,
        iters_per_epoch=args.iters_per_epoch,
        jitter=not args.no_jitter,
        no_adv_source_term=args.no_adv_source_term,
        no_gaux=args.no_gaux,
        no_cmmc=args.no_cmmc,
        no_cmmc_h=args.no_cmmc_h,
        no_mixup=args.no_mixup,
        beta_lambda2=args.beta_lambda2,
        attached_weights=args.attached_weights,
    )


def cmd_generate(args, parser: argparse.ArgumentParser) -> int:
    if args.common >= args.total:
        parser.error("open-set tasks require --common strictly below --total")
    cfg = SynthConfig(
        feature_dim=args.dim,
        samples_per_class=args.per_class,
        cluster_sigma=args.sigma,
        cluster_spacing=args.spacing,
        rotation_deg=args.rotation,
        translation_scale=args.translation,
        spread_multiplier=args.spread,
        seed=args.seed,
    )
    task = generate_task(cfg, args.common, args.total)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_feature_table(task, out)
    manifest = {
        "tool": "osdalab",
        "version": __version__,
        "command": "generate",
        "config": dataclasses.asdict(cfg),
        "n_source_classes": task.n_source_classes,
        "n_total_classes": task.n_total_classes,
        "openness": task.openness,
        "n_source": task.n_source,
        "n_target": task.n_target,
        "artifact": str(out),
    }
    manifest_path = out.with_name(out.stem + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {out} (openness {_fmt(task.openness)}) and {manifest_path}")
    return 0


def _write_audit_csv(path, audit_rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "epoch",
                "target_index",
                "omega_ent",
                "omega_cons",
                "omega_conf",
                "omega_t",
                "pseudo_label",
                "gated",
                "lambda2",
            ]
        )
        for row in audit_rows:
            writer.writerow(
                [
                    row.epoch,
                    row.target_index,
                    _fmt(row.entropy),
                    _fmt(row.consistency),
                    _fmt(row.confidence),
                    _fmt(row.commonness),
                    row.pseudo_label,
                    int(row.gated),
                    _fmt(row.ratio) if row.ratio is not None else "",
                ]
            )


def cmd_train(args, parser: argparse.ArgumentParser) -> int:
    try:
        cfg = _config_from_args(args, args.seed)
    except ValueError as exc:
        parser.error(str(exc))
    try:
        task = load_feature_table(args.task)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    out_dir = Path(args.out_dir if args.out_dir is not None else _default_outdir())
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = {
        "checkpoint": str(out_dir / "checkpoint.bin"),
        "trainlog": str(out_dir / "trainlog.jsonl"),
        "threshold_schedule": str(out_dir / "threshold.csv"),
        "audit": str(out_dir / "audit.csv"),
    }
    manifest = {
        "tool": "osdalab",
        "version": __version__,
        "command": "train",
        "task": str(args.task),
        "seed": args.seed,
        "config": dataclasses.asdict(cfg),
        "artifacts": artifacts,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    try:
        result = run(task, cfg)
    except NumericError as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return 2

    save_checkpoint(result.bundle, artifacts["checkpoint"])
    result.log.write_jsonl(artifacts["trainlog"])
    result.schedule.write_csv(artifacts["threshold_schedule"])
    _write_audit_csv(artifacts["audit"], result.audit_rows)

    summary = {"final_h": result.log.final_threshold}
    if result.log.final_metrics is not None:
        m = result.log.final_metrics
        summary.update(os=m.os_score, os_star=m.os_star, unknown=m.unknown_acc, h_score=m.h_score)
    print(json.dumps(summary))
    return 0


def cmd_eval(args, parser: argparse.ArgumentParser) -> int:
    try:
        task = load_feature_table(args.task)
        bundle = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if bundle.n_classes != task.n_source_classes:
        print(
            f"error: checkpoint was trained with {bundle.n_classes} source classes "
            f"but the task has {task.n_source_classes}",
            file=sys.stderr,
        )
        return 1
    if bundle.input_dim != task.feature_dim:
        print(
            f"error: checkpoint expects {bundle.input_dim}-dimensional features "
            f"but the task has {task.feature_dim}",
            file=sys.stderr,
        )
        return 1

    cfg = TrainConfig(seed=0, lambda1=args.lambda1, no_cmmc=args.mode == "open-threshold",
                      no_cmmc_h=args.mode == "open-confidence")
    try:
        metrics, used_h = evaluate(task, bundle, cfg, threshold=args.manual_h, pair_seed=args.pair_seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    record = {
        "os": metrics.os_score,
        "os_star": metrics.os_star,
        "unknown": metrics.unknown_acc,
        "h_score": metrics.h_score,
        "h": used_h,
        "manual_h": args.manual_h,
        "mode": args.mode,
    }
    print(json.dumps(record))
    if args.out:
        Path(args.out).write_text(json.dumps(record, indent=2) + "\n")
    return 0


def _parse_pairs(spec: str, parser: argparse.ArgumentParser) -> list[tuple[int, int]]:
    pairs = []
    for chunk in filter(None, (p.strip() for p in spec.split(","))):
        try:
            common, total = (int(v) for v in chunk.split(":"))
        except ValueError:
            parser.error(f"bad pair {chunk!r}; expected common:total")
        if common >= total:
            parser.error(f"pair {chunk!r}: common classes must be strictly below total")
        pairs.append((common, total))
    if not pairs:
        parser.error("--pairs must list at least one common:total setting")
    return pairs


def cmd_sweep(args, parser: argparse.ArgumentParser) -> int:
    pairs = _parse_pairs(args.pairs, parser)
    try:
        seeds = [int(s) for s in filter(None, (s.strip() for s in args.seeds.split(",")))]
    except ValueError:
        parser.error("--seeds must be a comma list of integers")
    if not seeds:
        parser.error("--seeds must list at least one seed")

    rows = []
    for common, total in pairs:
        cell_results = []
        for seed in seeds:
            synth = SynthConfig(feature_dim=args.dim, samples_per_class=args.per_class, seed=seed)
            openness = 1.0 - common / total
            try:
                task = generate_task(synth, common, total)
                cfg = _config_from_args(args, seed)
                result = run(task, cfg)
                metrics = result.log.final_metrics
                final_h = result.log.final_threshold
                rows.append(
                    {
                        "common": common,
                        "total": total,
                        "openness": openness,
                        "seed": str(seed),
                        "final_h": final_h,
                        "os": metrics.os_score,
                        "os_star": metrics.os_star,
                        "unknown": metrics.unknown_acc,
                        "h_score": metrics.h_score,
                        "status": "ok",
                    }
                )
                cell_results.append(rows[-1])
            except Exception as exc:  # keep sweeping; mark the failed cell
                print(f"cell {common}:{total} seed {seed} failed: {exc}", file=sys.stderr)
                rows.append(
                    {
                        "common": common,
                        "total": total,
                        "openness": openness,
                        "seed": str(seed),
                        "final_h": None,
                        "os": None,
                        "os_star": None,
                        "unknown": None,
                        "h_score": None,
                        "status": "error",
                    }
                )
        if cell_results:
            rows.append(
                {
                    "common": common,
                    "total": total,
                    "openness": openness,
                    "seed": "mean",
                    "final_h": float(np.mean([r["final_h"] for r in cell_results])),
                    "os": float(np.mean([r["os"] for r in cell_results])),
                    "os_star": float(np.mean([r["os_star"] for r in cell_results])),
                    "unknown": float(np.mean([r["unknown"] for r in cell_results])),
                    "h_score": float(np.mean([r["h_score"] for r in cell_results])),
                    "status": "aggregate",
                }
            )

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["common", "total", "openness", "seed", "final_h", "os", "os_star", "unknown", "h_score", "status"]
        )
        for row in rows:
            writer.writerow(
                [
                    row["common"],
                    row["total"],
                    _fmt(row["openness"]),
                    row["seed"],
                    _fmt(row["final_h"]) if row["final_h"] is not None else "",
                    _fmt(row["os"]) if row["os"] is not None else "",
                    _fmt(row["os_star"]) if row["os_star"] is not None else "",
                    _fmt(row["unknown"]) if row["unknown"] is not None else "",
                    _fmt(row["h_score"]) if row["h_score"] is not None else "",
                    row["status"],
                ]
            )
    print(f"wrote {out} ({len(rows)} rows)")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args, parser)


if __name__ == "__main__":
    sys.exit(main())
