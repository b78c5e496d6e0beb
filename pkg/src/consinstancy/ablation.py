"""Multi-variant, multi-seed training/evaluation harness.

Trains every requested variant from scratch once per seed, evaluates the
final and best-training-loss checkpoints on a held-out labeled manifest,
and aggregates per-variant mean and standard deviation of the headline
metrics. Instance metrics for the segmentation-only variant come from the
connected-component fallback; the other variants use the distance-map
post-processing. Failures in one cell are recorded and do not stop the
other cells.
"""

import json
import statistics
from pathlib import Path

from .metrics import MetricsAccumulator, MetricsReport
from .model import VARIANTS, load_checkpoint
from .panoptic import connected_component_segment, panoptic_segment
from .representations import InstanceLabelMap
from .tensorio import read_image_png, read_label_png
from .training import BEST_CHECKPOINT, TrainConfig, predict, train

SUMMARY_METRICS = ("oa", "mf1_seg", "pq", "f1_inst")


def evaluate_net(net, manifest, n_classes, tau=0.9, iou_min=0.5) -> MetricsReport:
    """Predict + post-process + score every labeled item of a manifest."""
    if not manifest.labeled_items:
        raise ValueError("evaluation manifest has no labeled items")
    accumulator = MetricsAccumulator(n_classes, iou_min)
    root = Path(manifest.root)
    for img_rel, lbl_rel in manifest.labeled_items:
        image = read_image_png(root / img_rel)
        ids = read_label_png(root / lbl_rel)
        maps = predict(net, image)
        if "delta_minus" in maps:
            pmap = panoptic_segment(maps["semantic"], maps["delta_minus"], tau)
        else:
            pmap = connected_component_segment(maps["semantic"])
        accumulator.add(pmap, InstanceLabelMap(ids))
    return accumulator.report()


def _cell_config(base: TrainConfig, variant, seed, cell_dir, epochs_by_variant):
    config = TrainConfig.from_dict(base.to_dict())
    config.variant = variant
    config.seed = int(seed)
    config.checkpoint_dir = str(Path(cell_dir) / "checkpoints")
    if epochs_by_variant and variant in epochs_by_variant:
        config.max_epochs = int(epochs_by_variant[variant])
    return config.validate()


def run_ablation(train_manifest, test_manifest, base_config: TrainConfig, seeds,
                 out_dir, variants=VARIANTS, tau=0.9, iou_min=0.5,
                 epochs_by_variant=None, progress=None):
    """Returns {"cells": variant -> seed -> cell dict, "summary": ...} and
    writes ablation.json plus an aligned-text ablation.txt under out_dir."""
    if not seeds:
        raise ValueError("need at least one seed")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_classes = base_config.model.n_classes

    cells = {}
    for variant in variants:
        cells[variant] = {}
        for seed in seeds:
            cell_dir = out_dir / f"{variant}_seed{seed}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            config = _cell_config(base_config, variant, seed, cell_dir, epochs_by_variant)
            if progress is not None:
                progress(f"training {variant} seed {seed} ({config.max_epochs} epochs)")
            try:
                state, history = train(config, train_manifest)
                history.save(cell_dir / "history.jsonl", cell_dir / "timing.jsonl")
                final_report = evaluate_net(state.net, test_manifest, n_classes, tau, iou_min)
                final_report.save(cell_dir / "metrics_final.json")
                best_state = load_checkpoint(Path(config.checkpoint_dir) / BEST_CHECKPOINT)
                best_report = evaluate_net(best_state.net, test_manifest, n_classes, tau, iou_min)
                best_report.save(cell_dir / "metrics_best.json")
                cells[variant][str(seed)] = {
                    "final": final_report.to_dict(),
                    "best": best_report.to_dict(),
                }
            except Exception as exc:  # keep the remaining cells running
                cells[variant][str(seed)] = {"error": f"{type(exc).__name__}: {exc}"}
                if progress is not None:
                    progress(f"cell {variant} seed {seed} failed: {exc}")

    summary = summarize_cells(cells)
    result = {"seeds": [int(s) for s in seeds], "tau": tau, "iou_min": iou_min,
              "cells": cells, "summary": summary}
    with open(out_dir / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "ablation.txt", "w", encoding="utf-8") as fh:
        fh.write(format_table(result))
    return result


def summarize_cells(cells, checkpoint="final"):
    """Per-variant mean/std (sample std; null below 2 values) of the
    headline metrics over the non-failed seeds."""
    summary = {}
    for variant, by_seed in cells.items():
        summary[variant] = {}
        reports = [cell[checkpoint] for cell in by_seed.values() if checkpoint in cell]
        summary[variant]["n_ok"] = len(reports)
        summary[variant]["n_failed"] = len(by_seed) - len(reports)
        for metric in SUMMARY_METRICS:
            values = [r[metric] for r in reports]
            summary[variant][metric] = {
                "mean": statistics.fmean(values) if values else None,
                "std": statistics.stdev(values) if len(values) >= 2 else None,
                "median": statistics.median(values) if values else None,
                "per_seed": {
                    seed: cell[checkpoint][metric]
                    for seed, cell in by_seed.items()
                    if checkpoint in cell
                },
            }
    return summary


def _fmt(value):
    return "-" if value is None else f"{value:.4f}"


def format_table(result):
    """Aligned-text view: per-variant class-wise rates, then the headline
    mean +/- std block across variants."""
    cells, summary = result["cells"], result["summary"]
    lines = []
    for variant, by_seed in cells.items():
        reports = [cell["final"] for cell in by_seed.values() if "final" in cell]
        lines.append(f"== {variant} (final checkpoint, {len(reports)} run(s)) ==")
        if not reports:
            errors = [cell.get("error", "?") for cell in by_seed.values()]
            lines.extend(f"  FAILED: {e}" for e in errors)
            lines.append("")
            continue
        n_classes = len(reports[0]["per_class_f1"])
        header = f"  {'class':>8} {'recall':>10} {'precision':>10} {'F1':>10}"
        lines.append(header)
        for c in range(n_classes):
            rec = statistics.fmean(r["per_class_recall"][c] for r in reports)
            pre = statistics.fmean(r["per_class_precision"][c] for r in reports)
            f1 = statistics.fmean(r["per_class_f1"][c] for r in reports)
            lines.append(f"  {c:>8d} {rec:>10.4f} {pre:>10.4f} {f1:>10.4f}")
        lines.append("")

    lines.append(f"{'variant':<10}" + "".join(f"{m:>20}" for m in SUMMARY_METRICS))
    for variant, stats in summary.items():
        row = f"{variant:<10}"
        for metric in SUMMARY_METRICS:
            mean, std = stats[metric]["mean"], stats[metric]["std"]
            if mean is None:
                cell = "-"
            elif std is None:
                cell = f"{mean:.4f}"
            else:
                cell = f"{mean:.4f} +/- {std:.4f}"
            row += f"{cell:>20}"
        lines.append(row)
    lines.append("")
    return "\n".join(lines) + "\n"
