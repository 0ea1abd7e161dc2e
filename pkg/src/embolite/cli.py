"""Experiment orchestration CLI.

    embolite gen-data|train-stage1|train-stage2|eval|ablate --config cfg.json
             [--out DIR] [--force] [--jobs N]

Every subcommand writes a self-describing run directory (resolved
config.json plus its artifacts). EMBOLITE_SEED overrides the config seed.
Exit codes: 0 success, 2 config error, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import detector as det
from . import metrics as M
from .config import (ConfigError, RunConfig, load_config, variant_stage2, write_config)
from .nn import CheckpointError
from .unet import load_stage1, train_stage1, _write_metrics_csv
from .volume import (DataError, PhantomSpec, SEVERITIES, SEVERITY_RADII, NOISE_PROFILES,
                     dataset_manifest, generate_phantom, save_annotation, save_volume,
                     write_manifest)

log = logging.getLogger(__name__)


def cmd_gen_data(cfg: RunConfig, force: bool = False) -> Path:
    """Generate the phantom dataset and its manifest under cfg.data.root."""
    root = Path(cfg.data.root)
    if root.exists() and any(root.iterdir()) and not force:
        raise DataError(f"output directory {root} is not empty (use --force to overwrite)")
    (root / "studies").mkdir(parents=True, exist_ok=True)

    data = cfg.data
    severity_cycle = list(SEVERITIES)
    profile_cycle = sorted(NOISE_PROFILES)
    rows = []
    counter = 0
    for split in ("train", "val", "test"):
        n_pos, n_neg = data.counts.get(split, [0, 0])
        for i in range(n_pos + n_neg):
            positive = i < n_pos
            kind = "pos" if positive else "neg"
            study_id = f"{split}_{kind}_{i:03d}"
            severity = severity_cycle[i % len(severity_cycle)] if positive else "none"
            seed = int(np.random.SeedSequence([cfg.seed, 11, counter]).generate_state(1)[0])
            spec = PhantomSpec(
                dims=tuple(data.dims),
                slice_spacing_mm=data.slice_spacing_mm,
                vessel_count=data.vessel_count,
                embolus_count=data.emboli_per_positive if positive else 0,
                embolus_radius_range_voxels=SEVERITY_RADII[severity] if positive else (2.2, 3.0),
                contrast_delta=data.contrast_delta,
                noise_sigma=data.noise_sigma,
                seed=seed,
                severity=severity,
                noise_profile=profile_cycle[counter % len(profile_cycle)],
            )
            volume, annotation, label = generate_phantom(spec, study_id)
            vol_rel = f"studies/{study_id}.embv"
            ann_rel = f"studies/{study_id}.emba"
            save_volume(volume, root / vol_rel)
            save_annotation(annotation, root / ann_rel)
            rows.append({
                "study_id": study_id,
                "volume_path": vol_rel,
                "annotation_path": ann_rel,
                "label": label.label,
                "severity": label.severity,
                "noise_profile": label.noise_profile,
                "split": split,
            })
            counter += 1
    write_manifest(root, rows)
    log.info("wrote %d studies to %s", len(rows), root)
    return root


def cmd_train_stage1(cfg: RunConfig) -> dict:
    run_dir = Path(cfg.out_dir) / "stage1"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, run_dir / "config.json")
    summary = train_stage1(cfg, run_dir)
    log.info("stage1 best validation dice: %.4f", summary["best_val_dice"])
    return summary


def _stage1_checkpoint_path(cfg: RunConfig) -> Path:
    if cfg.stage2.stage1_checkpoint:
        return Path(cfg.stage2.stage1_checkpoint)
    return Path(cfg.out_dir) / "stage1" / "best.ckpt"


def cmd_train_stage2(cfg: RunConfig) -> dict:
    run_dir = Path(cfg.out_dir) / "stage2"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, run_dir / "config.json")
    ckpt = _stage1_checkpoint_path(cfg)
    if not ckpt.exists():
        raise DataError(f"stage1 checkpoint not found: {ckpt} (run train-stage1 first)")
    summary = det.train_stage2(cfg, ckpt, run_dir)
    log.info("stage2 best validation AUROC: %.4f", summary["best"]["val_auroc"])
    return summary


def cmd_eval(cfg: RunConfig, jobs: int = 1) -> dict:
    split = cfg.eval.split
    run_dir = Path(cfg.out_dir) / f"eval_{split}"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, run_dir / "config.json")

    s1_path = Path(cfg.eval.stage1_checkpoint) if cfg.eval.stage1_checkpoint else _stage1_checkpoint_path(cfg)
    s2_path = (Path(cfg.eval.stage2_checkpoint) if cfg.eval.stage2_checkpoint
               else Path(cfg.out_dir) / "stage2" / "best.ckpt")
    for path in (s1_path, s2_path):
        if not path.exists():
            raise DataError(f"checkpoint not found: {path}")
    stage1_model = load_stage1(s1_path)
    detector = det.load_stage2(s2_path)

    entries = dataset_manifest(cfg.data.root)
    selected = [e for e in entries if e.split == split]
    if not selected:
        raise DataError(f"manifest has no studies in split {split!r}")

    def score(entry):
        volume, _, label = entry.load()
        prob, n_windows = det.infer_study(stage1_model, detector, volume, cfg.preprocess)
        return M.PredictionRow(entry.study_id, prob, label.y, label.severity,
                               label.noise_profile), n_windows

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(score, selected))
    else:
        results = [score(e) for e in selected]

    pred_rows = [r for r, _ in results]
    with open(run_dir / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["study_id", "y_hat", "label", "severity", "noise_profile", "n_windows"])
        for (row, n_windows) in results:
            writer.writerow([row.study_id, repr(float(row.score)), row.label,
                             row.severity, row.noise_profile, n_windows])

    reports = M.stratified_report(pred_rows, cfg.eval.threshold)
    with open(run_dir / "report.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stratum", "n_pos", "n_neg", "auc", "f1", "acc", "rec", "prec"])
        for r in reports:
            writer.writerow([
                r.stratum, r.n_pos, r.n_neg,
                "NA" if r.auc is None else repr(float(r.auc)),
                repr(float(r.f1)), repr(float(r.acc)),
                "NA" if np.isnan(r.rec) else repr(float(r.rec)),
                "NA" if np.isnan(r.prec) else repr(float(r.prec)),
            ])

    curve = M.auroc([r.score for r in pred_rows], [r.label for r in pred_rows])
    with open(run_dir / "roc.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr"])
        for fpr, tpr in curve.points:
            writer.writerow([repr(float(fpr)), repr(float(tpr))])

    print(M.format_report_table(reports))
    log.info("eval %s: overall AUROC %.4f over %d studies", split, curve.auc, len(pred_rows))
    return {"reports": reports, "auc": curve.auc, "run_dir": run_dir}


def cmd_ablate(cfg: RunConfig) -> dict:
    """Train every detector variant and the bag-length sweep under one budget."""
    run_dir = Path(cfg.out_dir) / "ablate"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, run_dir / "config.json")
    ckpt = _stage1_checkpoint_path(cfg)
    if not ckpt.exists():
        raise DataError(f"stage1 checkpoint not found: {ckpt} (run train-stage1 first)")

    stage1_model = load_stage1(ckpt)
    entries = dataset_manifest(cfg.data.root)
    wanted = [e for e in entries if e.split in ("train", "val")]
    stacks = det.prepare_stage2_inputs(wanted, stage1_model, cfg.preprocess)

    def run_variant(sub_cfg, name):
        sub_dir = run_dir / name
        summary = det.train_stage2_on_stacks(sub_cfg, stacks, wanted, sub_dir)
        best = summary["best"]
        return {"accuracy": best["val_acc"], "auc": best["val_auroc"], "f1": best["val_f1"]}

    variant_rows = []
    for name in cfg.ablation.variants:
        sub_cfg = dataclasses.replace(
            cfg, stage2=variant_stage2(cfg.stage2, name, cfg.ablation.epochs)
        )
        metrics = run_variant(sub_cfg, name.replace("+", "_"))
        variant_rows.append({"variant": name, **metrics})
        log.info("ablation %s: acc=%.3f auc=%.3f f1=%.3f", name,
                 metrics["accuracy"], metrics["auc"], metrics["f1"])
    _write_metrics_csv(run_dir / "ablation.csv", ["variant", "accuracy", "auc", "f1"], variant_rows)

    sweep_rows = []
    for t_value in cfg.ablation.t_sweep:
        sub_pre = dataclasses.replace(
            cfg.preprocess, instances=int(t_value), overlap=min(cfg.preprocess.overlap, int(t_value) - 1)
        )
        sub_cfg = dataclasses.replace(
            cfg,
            preprocess=sub_pre,
            stage2=dataclasses.replace(cfg.stage2, epochs=cfg.ablation.epochs),
        )
        metrics = run_variant(sub_cfg, f"T{t_value}")
        sweep_rows.append({"T": int(t_value), **metrics})
        log.info("T-sweep T=%d: acc=%.3f auc=%.3f f1=%.3f", t_value,
                 metrics["accuracy"], metrics["auc"], metrics["f1"])
    _write_metrics_csv(run_dir / "tsweep.csv", ["T", "accuracy", "auc", "f1"], sweep_rows)

    print(_ablation_table(variant_rows, "variant"))
    print()
    print(_ablation_table(sweep_rows, "T"))
    return {"variants": variant_rows, "t_sweep": sweep_rows, "run_dir": run_dir}


def _ablation_table(rows, key) -> str:
    headers = [key, "accuracy", "auc", "f1"]
    body = [[str(r[key])] + [f"{r[c]:.4f}" for c in headers[1:]] for r in rows]
    widths = [max(len(h), *(len(row[i]) for row in body)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines += ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in body]
    return "\n".join(lines)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embolite",
                                     description="Two-stage PE detection pipeline on synthetic phantoms")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train-stage1", "train-stage2", "eval", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to a run config JSON")
        p.add_argument("--out", default=None, help="override config out_dir")
        p.add_argument("--force", action="store_true", help="overwrite non-empty data directories")
        p.add_argument("--jobs", type=int, default=1, help="parallel studies during eval")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg = dataclasses.replace(cfg, out_dir=args.out)
        env_seed = os.environ.get("EMBOLITE_SEED")
        if env_seed is not None:
            try:
                cfg = dataclasses.replace(cfg, seed=int(env_seed))
            except ValueError as exc:
                raise ConfigError(f"EMBOLITE_SEED must be an integer, got {env_seed!r}") from exc

        if args.command == "gen-data":
            cmd_gen_data(cfg, force=args.force)
        elif args.command == "train-stage1":
            cmd_train_stage1(cfg)
        elif args.command == "train-stage2":
            cmd_train_stage2(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, jobs=args.jobs)
        elif args.command == "ablate":
            cmd_ablate(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
