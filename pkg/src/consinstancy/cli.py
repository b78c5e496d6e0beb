"""Command-line entry point.

Subcommands: generate (synthetic dataset), make-reps (export reference
representation maps), train, infer, evaluate, ablate. Every command accepts
--config JSON whose keys are the flag names; explicit flags override file
values, and each run writes the fully resolved parameters to
effective_config.json in its output directory, from which the run can be
reproduced bit-exactly (single-threaded; wall-clock telemetry excluded).
Relative paths resolve against $CONSINSTANCY_DATA_DIR when that is set.
"""

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import __version__
from .ablation import run_ablation
from .metrics import MetricsAccumulator
from .model import ModelConfig, VARIANTS, load_checkpoint
from .panoptic import connected_component_segment, panoptic_segment, save_panoptic, load_panoptic
from .representations import InstanceLabelMap, reference_maps
from .synthdata import DatasetManifest, SceneSpec, generate_dataset
from .tensorio import read_float_map, read_image_png, read_label_png, write_float_map
from .training import TrainConfig, predict, train

_MODES = {
    "sedimentation": {"boundary_softness": 0.0, "noise_std": 0.02},
    "fresh": {"boundary_softness": 1.5, "noise_std": 0.05},
}

REP_SUFFIXES = ("semantic", "orientation", "delta_plus", "delta_minus")


class UsageError(Exception):
    pass


def data_root():
    return Path(os.environ.get("CONSINSTANCY_DATA_DIR", "."))


def resolve_path(p):
    p = Path(p)
    return p if p.is_absolute() else data_root() / p


def _require(value, flag):
    if value is None:
        raise UsageError(f"{flag} is required (flag or config file)")
    return value


def _write_snapshot(out_dir, command, args):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command}
    for key, value in vars(args).items():
        if key in ("func", "config", "command"):
            continue
        payload[key] = str(value) if isinstance(value, Path) else value
    with open(out_dir / "effective_config.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def cmd_generate(args):
    if args.labeled == 0 and args.unlabeled == 0:
        raise UsageError("nothing to generate: --labeled and --unlabeled are both 0")
    preset = _MODES[args.mode]
    softness = args.boundary_softness
    if softness is None:
        softness = preset["boundary_softness"]
    noise = args.noise_std
    if noise is None:
        noise = preset["noise_std"]
    spec = SceneSpec(
        height=args.height,
        width=args.width,
        particle_count_range=(args.min_particles, args.max_particles),
        radius_range=(args.min_radius, args.max_radius),
        adjacency_prob=args.adjacency_prob,
        boundary_softness=softness,
        noise_std=noise,
        texture_scale=args.texture_scale,
        seed=args.seed,
    ).validate()

    out = resolve_path(_require(args.out, "--out"))
    _write_snapshot(out, "generate", args)
    manifest = generate_dataset(spec, args.labeled, args.unlabeled, out, split_name="train")
    print(f"wrote train manifest: {len(manifest.labeled_items)} labeled, "
          f"{len(manifest.unlabeled_items)} unlabeled under {out}")
    if args.test_labeled > 0:
        test_spec = replace(spec, seed=spec.seed + args.labeled + args.unlabeled)
        test_manifest = generate_dataset(test_spec, args.test_labeled, 0, out, split_name="test")
        print(f"wrote test manifest: {len(test_manifest.labeled_items)} labeled under {out}")
    return 0


def cmd_make_reps(args):
    manifest = DatasetManifest.load(resolve_path(_require(args.manifest, "--manifest")))
    if not manifest.labeled_items:
        raise UsageError("manifest has no labeled items; nothing to export")
    out = resolve_path(_require(args.out, "--out"))
    _write_snapshot(out, "make-reps", args)
    root = Path(manifest.root)
    for img_rel, lbl_rel in manifest.labeled_items:
        ids = read_label_png(root / lbl_rel)
        maps = reference_maps(InstanceLabelMap(ids), args.n_classes)
        stem = out / Path(img_rel).stem
        for suffix, array in zip(REP_SUFFIXES, maps):
            write_float_map(f"{stem}.{suffix}.fmap", array)
    print(f"wrote {len(REP_SUFFIXES)} maps for each of "
          f"{len(manifest.labeled_items)} labeled item(s) to {out}")
    return 0


def _train_config_from_args(args, checkpoint_dir):
    model = ModelConfig(
        n_blocks=args.n_blocks,
        base_width=args.base_width,
        n_classes=args.n_classes,
        n_thing_classes=args.n_thing_classes,
        variant=args.variant,
        head_channels=args.head_channels,
    )
    return TrainConfig(
        variant=args.variant,
        batch_size=args.batch_size,
        labeled_per_batch=args.labeled_per_batch,
        lr=args.lr,
        lr_decay_factor=args.lr_decay,
        patience_epochs=args.patience,
        min_improvement=args.min_improvement,
        beta1=args.beta1,
        beta2=args.beta2,
        l2_factor=args.l2,
        max_epochs=args.epochs,
        seed=args.seed,
        checkpoint_dir=str(checkpoint_dir),
        loss_weights={"cons": args.cons_weight},
        model=model,
    ).validate()


def cmd_train(args):
    manifest = DatasetManifest.load(resolve_path(_require(args.manifest, "--manifest")))
    out = resolve_path(_require(args.out, "--out"))
    config = _train_config_from_args(args, out / "checkpoints")
    _write_snapshot(out, "train", args)

    def progress(record):
        if args.verbose:
            print(f"epoch {record['epoch']:>5d} total {record['total']:.6f} lr {record['lr']:g}")

    state, history = train(config, manifest, progress=progress)
    history.save(out / "history.jsonl", out / "timing.jsonl")
    last = history.records[-1]
    print(f"trained {config.variant} for {state.epoch} epoch(s); "
          f"final total loss {last['total']:.6f}; checkpoints in {config.checkpoint_dir}")
    return 0


def cmd_infer(args):
    checkpoint = resolve_path(_require(args.checkpoint, "--checkpoint"))
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    state = load_checkpoint(checkpoint)

    images = []
    if args.images:
        images = [resolve_path(p) for p in args.images]
    elif args.manifest:
        manifest = DatasetManifest.load(resolve_path(args.manifest))
        root = Path(manifest.root)
        if args.split in ("labeled", "all"):
            images += [root / img for img, _ in manifest.labeled_items]
        if args.split in ("unlabeled", "all"):
            images += [root / img for img in manifest.unlabeled_items]
    else:
        raise UsageError("provide --images or --manifest")
    if not images:
        raise UsageError("no images selected for inference")

    out = resolve_path(_require(args.out, "--out"))
    _write_snapshot(out, "infer", args)
    for path in images:
        image = read_image_png(path)
        maps = predict(state.net, image)
        stem = out / Path(path).stem
        write_float_map(f"{stem}.semantic.fmap", maps["semantic"])
        if "delta_minus" in maps:
            write_float_map(f"{stem}.orientation.fmap", maps["orientation"])
            write_float_map(f"{stem}.delta_plus.fmap", maps["delta_plus"])
            write_float_map(f"{stem}.delta_minus.fmap", maps["delta_minus"])
            pmap = panoptic_segment(maps["semantic"], maps["delta_minus"], args.tau)
            meta = {"method": "distance", "tau": args.tau, "variant": state.config.variant}
        else:
            pmap = connected_component_segment(maps["semantic"])
            meta = {"method": "connected_components", "tau": None,
                    "variant": state.config.variant}
        save_panoptic(stem, pmap, meta=meta)
    print(f"wrote predictions for {len(images)} image(s) to {out}")
    return 0


def _evaluation_refs(manifest):
    root = Path(manifest.root)
    refs = []
    for img_rel, lbl_rel in manifest.labeled_items:
        refs.append((Path(img_rel).stem, InstanceLabelMap(read_label_png(root / lbl_rel))))
    return refs


def cmd_evaluate(args):
    pred_dir = resolve_path(_require(args.predictions, "--predictions"))
    manifest = DatasetManifest.load(resolve_path(_require(args.manifest, "--manifest")))
    if not manifest.labeled_items:
        raise UsageError("manifest has no labeled items to evaluate against")
    out = resolve_path(args.out) if args.out else pred_dir
    refs = _evaluation_refs(manifest)
    _write_snapshot(out, "evaluate", args)

    if args.tau_sweep:
        needed = [f"{stem}.{kind}.fmap" for stem, _ in refs
                  for kind in ("semantic", "delta_minus")]
        missing = [name for name in needed if not (pred_dir / name).exists()]
        if missing:
            raise FileNotFoundError(
                "tau sweep needs semantic and delta_minus maps; missing: " + ", ".join(missing)
            )
        for tau in args.tau_sweep:
            accumulator = MetricsAccumulator(args.n_classes, args.iou_min)
            for stem, ref in refs:
                semantic = read_float_map(pred_dir / f"{stem}.semantic.fmap")
                delta_minus = read_float_map(pred_dir / f"{stem}.delta_minus.fmap")
                accumulator.add(panoptic_segment(semantic, delta_minus, tau), ref)
            report = accumulator.report()
            report.save(out / f"metrics_tau_{tau:g}.json")
            print(f"tau {tau:g}: OA {report.oa:.4f} MF1 {report.mf1_seg:.4f} "
                  f"PQ {report.pq:.4f} F1_inst {report.f1_inst:.4f}")
        return 0

    missing = []
    for stem, _ in refs:
        for name in (f"{stem}.class.png", f"{stem}.id.png", f"{stem}.panoptic.json"):
            if not (pred_dir / name).exists():
                missing.append(name)
    if missing:
        raise FileNotFoundError("missing prediction files: " + ", ".join(missing))

    accumulator = MetricsAccumulator(args.n_classes, args.iou_min)
    for stem, ref in refs:
        pmap, _ = load_panoptic(pred_dir / stem)
        accumulator.add(pmap, ref)
    report = accumulator.report()
    report.save(out / "metrics.json")
    print(f"evaluated {report.n_images} image(s): OA {report.oa:.4f} "
          f"MF1 {report.mf1_seg:.4f} PQ {report.pq:.4f} F1_inst {report.f1_inst:.4f}")
    return 0


def cmd_ablate(args):
    train_manifest = DatasetManifest.load(
        resolve_path(_require(args.train_manifest, "--train-manifest")))
    test_manifest = DatasetManifest.load(
        resolve_path(_require(args.test_manifest, "--test-manifest")))
    out = resolve_path(_require(args.out, "--out"))
    if not args.seeds:
        raise UsageError("need at least one --seeds value")
    base = _train_config_from_args(args, out / "placeholder")
    epochs_by_variant = {}
    if args.epochs_seg is not None:
        epochs_by_variant["Seg"] = args.epochs_seg
    if args.epochs_inst is not None:
        epochs_by_variant["Inst"] = args.epochs_inst
    if args.epochs_consinst is not None:
        epochs_by_variant["ConsInst"] = args.epochs_consinst
    _write_snapshot(out, "ablate", args)

    progress = print if args.verbose else None
    result = run_ablation(
        train_manifest, test_manifest, base, args.seeds, out,
        variants=tuple(args.variants), tau=args.tau, iou_min=args.iou_min,
        epochs_by_variant=epochs_by_variant, progress=progress,
    )
    with open(out / "ablation.txt", encoding="utf-8") as fh:
        print(fh.read(), end="")
    failed = sum(
        1 for by_seed in result["cells"].values()
        for cell in by_seed.values() if "error" in cell
    )
    if failed:
        print(f"{failed} cell(s) failed; see ablation.json", file=sys.stderr)
        return 1
    return 0


def _add_train_flags(p):
    p.add_argument("--variant", choices=VARIANTS, default="ConsInst")
    p.add_argument("--epochs", type=int, default=300, help="max training epochs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-decay", type=float, default=0.1)
    p.add_argument("--patience", type=int, default=25)
    p.add_argument("--min-improvement", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--labeled-per-batch", type=int, default=4)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--l2", type=float, default=1e-5)
    p.add_argument("--cons-weight", type=float, default=1.0,
                   help="multiplier on the consistency term")
    p.add_argument("--n-classes", type=int, default=2)
    p.add_argument("--n-thing-classes", type=int, default=1)
    p.add_argument("--n-blocks", type=int, default=4)
    p.add_argument("--base-width", type=int, default=8)
    p.add_argument("--head-channels", type=int, default=32)
    p.add_argument("--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="consinstancy",
        description="Semi-supervised panoptic segmentation of particle scenes.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command")
    command_parsers = {}

    def add_command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of flag values (flags override)")
        p.set_defaults(func=func)
        command_parsers[name] = p
        return p

    p = add_command("generate", cmd_generate, "generate a synthetic particle dataset")
    p.add_argument("--out", help="dataset directory")
    p.add_argument("--labeled", type=int, default=17)
    p.add_argument("--unlabeled", type=int, default=200)
    p.add_argument("--test-labeled", type=int, default=50)
    p.add_argument("--mode", choices=sorted(_MODES), default="sedimentation")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--min-particles", type=int, default=3)
    p.add_argument("--max-particles", type=int, default=8)
    p.add_argument("--min-radius", type=float, default=4.0)
    p.add_argument("--max-radius", type=float, default=9.0)
    p.add_argument("--adjacency-prob", type=float, default=0.0)
    p.add_argument("--boundary-softness", type=float, default=None,
                   help="override the mode preset")
    p.add_argument("--noise-std", type=float, default=None, help="override the mode preset")
    p.add_argument("--texture-scale", type=float, default=0.03)
    p.add_argument("--seed", type=int, default=0)

    p = add_command("make-reps", cmd_make_reps,
                    "export reference representation maps for a manifest")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--n-classes", type=int, default=2)

    p = add_command("train", cmd_train, "train one variant on a manifest")
    p.add_argument("--manifest")
    p.add_argument("--out", help="run directory (checkpoints, history)")
    _add_train_flags(p)

    p = add_command("infer", cmd_infer, "run a checkpoint over images")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--manifest")
    p.add_argument("--split", choices=("labeled", "unlabeled", "all"), default="labeled")
    p.add_argument("--images", nargs="*", help="explicit image paths instead of a manifest")
    p.add_argument("--tau", type=float, default=0.9)

    p = add_command("evaluate", cmd_evaluate, "score predictions against a labeled manifest")
    p.add_argument("--predictions")
    p.add_argument("--manifest")
    p.add_argument("--out", help="report directory (default: predictions dir)")
    p.add_argument("--n-classes", type=int, default=2)
    p.add_argument("--iou-min", type=float, default=0.5)
    p.add_argument("--tau-sweep", type=float, nargs="*",
                   help="re-run post-processing per tau from stored distance maps")

    p = add_command("ablate", cmd_ablate, "train and evaluate all variants over seeds")
    p.add_argument("--train-manifest")
    p.add_argument("--test-manifest")
    p.add_argument("--out")
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    p.add_argument("--tau", type=float, default=0.9)
    p.add_argument("--iou-min", type=float, default=0.5)
    p.add_argument("--epochs-seg", type=int, default=None)
    p.add_argument("--epochs-inst", type=int, default=None)
    p.add_argument("--epochs-consinst", type=int, default=None)
    _add_train_flags(p)

    return parser, command_parsers


def _peek_option(argv, name):
    for i, arg in enumerate(argv):
        if arg == name and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith(name + "="):
            return arg.split("=", 1)[1]
    return None


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    torch.set_num_threads(1)
    parser, command_parsers = build_parser()

    config_path = _peek_option(argv, "--config")
    command = next((a for a in argv if not a.startswith("-")), None)
    if config_path and command in command_parsers:
        with open(resolve_path(config_path), encoding="utf-8") as fh:
            loaded = json.load(fh)
        loaded.pop("command", None)
        command_parsers[command].set_defaults(**loaded)

    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return 2
    try:
        return args.func(args) or 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # any failure means outputs were not all written
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
