"""
Command-line interface for gridloc.

Usage:
    gridloc gen-data --out data/                     # Generate the synthetic corpus
    gridloc train --dataset data/ --head grid        # Train a localization head
    gridloc eval --checkpoint runs/grid/checkpoint --dataset data/
    gridloc compare runs/reg/eval.json runs/grid/eval.json --html
    gridloc decode heatmaps --roi '{"x_l": 10, "y_u": 10, "x_r": 50, "y_b": 40}'
    gridloc inspect runs/grid/checkpoint             # Print a checkpoint or dataset manifest
    gridloc coverage                                 # Grid point coverage per mapping
    gridloc ablate --study points --dataset data/    # Train and compare study variants

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or
numeric failure.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

from .config import RunConfig, configure_logging, parse_thresholds
from .errors import (
    BlobFormatError,
    ChecksumError,
    ConfigError,
    InputError,
    NumericError,
    PlacementError,
)

logger = logging.getLogger(__name__)

RUN_CONFIG_NAME = "run_config.json"


# =============================================================================
# CONFIGURATION
# =============================================================================

def build_config(args: argparse.Namespace) -> RunConfig:
    """JSON config file first, then flags on top; flags win."""
    config = RunConfig.load(getattr(args, "config", None)).with_seed(getattr(args, "seed", None))

    model = {
        "grid": getattr(args, "grid", None),
        "fusion_order": getattr(args, "fusion", None),
        "mapping": getattr(args, "mapping", None),
        "decode_mode": getattr(args, "decode_mode", None),
    }
    train = {
        "epochs": getattr(args, "epochs", None),
        "lr": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None),
    }
    data = {
        "train_count": getattr(args, "train_count", None),
        "val_count": getattr(args, "val_count", None),
    }
    changes = {}
    for section, values in (("model", model), ("train", train), ("data", data)):
        values = {k: v for k, v in values.items() if v is not None}
        if values:
            changes[section] = replace(getattr(config, section), **values)
    if getattr(args, "thresholds", None):
        changes["eval"] = replace(config.eval, iou_thresholds=tuple(parse_thresholds(args.thresholds)))
    if getattr(args, "out", None) is not None:
        changes["out_dir"] = str(args.out)
    config = replace(config, **changes)
    config.validate()
    return config


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_gen_data(args: argparse.Namespace) -> None:
    """Generate train/val splits plus manifest."""
    from .scenes import manifest_checksum, write_dataset

    config = build_config(args)
    out = Path(config.out_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise InputError(f"{out} exists and is not empty; pass --force to overwrite")

    print(f"\n🎲 Generating {config.data.train_count:,} train / {config.data.val_count:,} val scenes (seed {config.seed})...")
    manifest = write_dataset(out, config.seed, config.data, config.scenes, config.jitter)
    config.save(out / RUN_CONFIG_NAME)
    for name, digest in sorted(manifest["files"].items()):
        print(f"   {name}: {digest[:16]}")
    print(f"   ✅ Manifest checksum: {manifest_checksum(manifest)}")
    print(f"   ✅ Saved: {out}/\n")


def cmd_train(args: argparse.Namespace) -> None:
    """Train one head on the train split; writes checkpoint, loss curve and config."""
    from .gridnet import GridDetector, save_checkpoint
    from .scenes import dataset_id, read_dataset
    from .traineval.train import train

    config = build_config(args)
    if args.head == "grid" and config.model.grid_name == "2pt" and config.model.fusion_order > 0:
        print("⚠️  Fusion is inert on the 2-point grid (no grid point has neighbours); the run proceeds without it.")
        logger.warning("fusion_order=%d has no effect on the 2pt grid", config.model.fusion_order)

    manifest, data = read_dataset(args.dataset, ("train",))
    out = _out_dir(config)
    model = GridDetector(config.model, args.head, config.seed)
    print(f"\n🚀 Training {args.head} head ({model.parameter_count():,} parameters, "
          f"{len(data['train']):,} scenes, {config.train.epochs} epochs)...")
    result = train(model, data["train"], config.train)

    save_checkpoint(model, out / "checkpoint", {"dataset_id": dataset_id(manifest)})
    result.loss_curve.write_csv(out / "loss.csv")
    config.save(out / RUN_CONFIG_NAME)
    print(f"   📉 Final loss: {result.final_loss:.5f} ({result.skipped_rois} RoIs without a valid grid point)")
    print(f"   ✅ Saved: {out}/checkpoint.json, {out}/loss.csv\n")


def _load_detections(path: Path):
    from .traineval.detect import Detection

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"detections file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON ({e})") from None
    rows = data["detections"] if isinstance(data, dict) else data
    try:
        return [Detection.from_dict(row) for row in rows]
    except (KeyError, TypeError) as e:
        raise InputError(f"{path}: malformed detection ({e})") from None


def cmd_eval(args: argparse.Namespace) -> None:
    """Evaluate a checkpoint (or a detections file) on the val split."""
    from .gridnet import load_checkpoint
    from .scenes import dataset_id, read_dataset
    from .traineval.detect import detect_samples
    from .traineval.evaluate import evaluate_ap, ground_truth_from_samples

    if args.checkpoint is None and args.detections_file is None:
        raise InputError("eval needs --checkpoint or --detections-file")
    config = build_config(args)
    manifest, data = read_dataset(args.dataset, ("val",))
    data_id = dataset_id(manifest)
    samples = data["val"]

    if args.detections_file is not None:
        print(f"\n📊 Evaluating detections from {args.detections_file}...")
        detections = _load_detections(args.detections_file)
        label = args.label or Path(args.detections_file).stem
    else:
        model, meta = load_checkpoint(args.checkpoint)
        trained_on = meta.get("dataset_id")
        if trained_on and trained_on != data_id:
            raise ConfigError("dataset", f"checkpoint was trained on dataset {trained_on}, got {data_id}")
        print(f"\n📊 Evaluating {model.head} checkpoint on {len(samples):,} scenes...")
        detections = detect_samples(model, samples, config.eval.top_k, config.eval.nms_iou)
        label = args.label or model.head

    result = evaluate_ap(
        detections,
        ground_truth_from_samples(samples),
        config.eval.iou_thresholds,
        config.eval.small_area,
        config.eval.large_area,
        dataset_id=data_id,
        label=label,
    )
    out = _out_dir(config)
    path = result.save(out, args.stem)
    config.save(out / RUN_CONFIG_NAME)
    print(f"   📈 {result.summary()}")
    print(f"   ✅ Saved: {path}\n")


def cmd_compare(args: argparse.Namespace) -> None:
    """Ablation report of two or more evaluation results; the first is the baseline."""
    from .traineval.evaluate import EvalResult
    from .traineval.report import ablation_report, write_html_report

    results = [EvalResult.load(path) for path in args.runs]
    datasets = {r.dataset_id for r in results}
    if len(datasets) > 1:
        raise InputError(f"runs were evaluated on different datasets: {sorted(datasets)}")
    labels = [r.label or Path(p).stem for r, p in zip(results, args.runs)]
    if len(set(labels)) < len(labels):
        labels = [f"{label}#{k}" for k, label in enumerate(labels)]

    report = ablation_report(results, labels)
    out = Path(args.out)
    report.write(out)
    print(f"\n📊 Baseline: {labels[0]}")
    for row in report.deltas.iter_rows(named=True):
        gains = "  ".join(f"{k[3:]} {100 * v:+.1f}" for k, v in row.items() if k.startswith("AP@"))
        print(f"   {row['label']}: AP {100 * row['AP']:+.1f} | {gains}")
    if args.html:
        html = write_html_report(report, out / "report.html")
        print(f"   ✅ Report: {html}")
    print(f"   ✅ Saved: {out}/\n")


def _parse_roi(text: str) -> dict:
    path = Path(text)
    try:
        data = json.loads(path.read_text(encoding="utf-8") if path.exists() else text)
    except json.JSONDecodeError as e:
        raise InputError(f"--roi: invalid JSON ({e})") from None
    if isinstance(data, list) and len(data) == 4:
        return dict(zip(("x_l", "y_u", "x_r", "y_b"), data))
    if not isinstance(data, dict):
        raise InputError("--roi: expected an object with x_l, y_u, x_r, y_b or p_x, p_y, w_p, h_p")
    return data


def cmd_decode(args: argparse.Namespace) -> None:
    """Decode a blob of (n, H, W) heatmap probabilities into grid points and a box."""
    import numpy as np

    from .errors import ShapeError
    from .gridgeom import BoxBounds, GridSpec, RoiGeometry, boxes_from_grid_points, decode_heatmaps, enlarge_roi
    from .numkit.blob import load_blob

    tensors, _ = load_blob(args.blob)
    if "heatmaps" not in tensors:
        raise BlobFormatError(f"{args.blob}: no 'heatmaps' tensor (have {sorted(tensors)})")
    heatmaps = np.asarray(tensors["heatmaps"], dtype=np.float64)
    if heatmaps.ndim != 3 or heatmaps.shape[1] != heatmaps.shape[2]:
        raise ShapeError(f"heatmaps must be (n, H, H), got {heatmaps.shape}")
    spec = GridSpec.from_name(args.grid)
    if heatmaps.shape[0] != spec.n_points:
        raise ShapeError(f"grid {spec.name} has {spec.n_points} points, blob has {heatmaps.shape[0]} heatmaps")

    roi_data = _parse_roi(args.roi)
    size = heatmaps.shape[-1]
    try:
        if "p_x" in roi_data:
            roi = RoiGeometry(roi_data["p_x"], roi_data["p_y"], roi_data["w_p"], roi_data["h_p"], size, size)
        else:
            roi = RoiGeometry.from_box(BoxBounds(roi_data["x_l"], roi_data["y_u"], roi_data["x_r"], roi_data["y_b"]), size)
    except KeyError as e:
        raise InputError(f"--roi: missing field {e}") from None
    extended = args.mapping == "extended"
    if args.mapping == "enlarged":
        roi = enlarge_roi(roi)

    estimates = decode_heatmaps(heatmaps, roi, extended)
    modes = ("normalized", "literal") if args.mode == "both" else (args.mode,)
    output = {
        "grid": spec.name,
        "mapping": args.mapping,
        "roi": roi.to_dict(),
        "points": [{"index": e.index, "x": e.x, "y": e.y, "p": e.p} for e in estimates],
        "boxes": {mode: boxes_from_grid_points(estimates, spec, mode).to_dict() for mode in modes},
    }
    print(f"\n🔎 {spec.n_points} grid points ({args.mapping} mapping):")
    for e in estimates:
        print(f"   [{e.index}] x={e.x:.3f} y={e.y:.3f} p={e.p:.3f}")
    for mode, box in output["boxes"].items():
        print(f"   📦 {mode}: ({box['x_l']:.3f}, {box['y_u']:.3f}, {box['x_r']:.3f}, {box['y_b']:.3f})")
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(output, indent=2) + "\n", encoding="utf-8")
        print(f"   ✅ Saved: {args.out}")
    if args.html is not None:
        from .viz import plots, theme

        args.html.parent.mkdir(parents=True, exist_ok=True)
        titles = [f"point {e.index} (p={e.p:.2f})" for e in estimates]
        path = theme.save_figure(plots.plot_heatmaps(heatmaps, titles), args.html, "html")
        print(f"   ✅ Heatmaps: {path}")
    print()


def cmd_inspect(args: argparse.Namespace) -> None:
    """Print a checkpoint manifest, or a dataset manifest when given a directory."""
    from .config import ModelConfig
    from .gridnet import expected_parameter_count
    from .numkit.blob import read_manifest
    from .scenes import MANIFEST_NAME, manifest_checksum
    from .scenes import read_manifest as read_dataset_manifest

    path = Path(args.path)
    print("\n" + "=" * 60)
    if path.is_dir() and (path / MANIFEST_NAME).exists():
        manifest = read_dataset_manifest(path)
        print(f"📁 DATASET {path}")
        print("=" * 60)
        print(f"   Seed: {manifest['seed']}")
        print(f"   Scenes: {manifest['counts']['train']:,} train / {manifest['counts']['val']:,} val")
        print(f"   Image size: {manifest['scenes']['image_size']}")
        print(f"   Checksum: {manifest_checksum(manifest)}")
    else:
        manifest = read_manifest(path)
        meta = manifest.get("meta", {})
        print(f"🧠 CHECKPOINT {path}")
        print("=" * 60)
        print(f"   Head: {meta.get('head', '?')}")
        print(f"   Seed: {meta.get('seed', '?')}")
        print(f"   Tensors: {len(manifest['tensors'])}")
        count = sum(int(_prod(t["shape"])) for t in manifest["tensors"].values())
        print(f"   Parameters: {count:,}")
        if "model" in meta:
            expected = expected_parameter_count(ModelConfig.from_dict(meta["model"]), meta.get("head", "grid"))
            print(f"   Expected parameters: {expected:,}")
            for key, value in meta["model"].items():
                print(f"   model.{key}: {value}")
        if meta.get("dataset_id"):
            print(f"   Dataset: {meta['dataset_id']}")
        print(f"   Payload sha256: {manifest['sha256'][:16]}")
    print("=" * 60 + "\n")


def _prod(shape) -> int:
    total = 1
    for dim in shape:
        total *= int(dim)
    return total


def cmd_coverage(args: argparse.Namespace) -> None:
    """Coverage of ground-truth grid points per grid and mapping."""
    from .experiments import coverage_checks, coverage_study
    from .viz import plots, theme

    print(f"\n📐 Coverage study over {args.n:,} jittered proposals (seed {args.seed})...")
    table = coverage_study(args.n, args.seed)
    for row in table.iter_rows(named=True):
        print(f"   {row['grid']:>4} {row['mapping']:>9}: {100 * row['coverage']:.2f}%")
    checks = coverage_checks(table)
    for row in checks.iter_rows(named=True):
        print(f"   {'✅' if row['passed'] else '❌'} {row['check']}")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        table.write_csv(args.out / "coverage.csv")
        checks.write_csv(args.out / "coverage_checks.csv")
        fig = plots.plot_coverage(table)
        for fmt in [f for f, wanted in (("html", args.html), ("png", args.png)) if wanted]:
            path = theme.save_figure(fig, args.out / "coverage", fmt)
            print(f"   ✅ Figure: {path}")
        print(f"   ✅ Saved: {args.out}/coverage.csv")
    print()


def cmd_ablate(args: argparse.Namespace) -> None:
    """Train every variant of a study per seed and compare the medians."""
    from .experiments import acceptance_checks, run_study
    from .traineval.report import write_html_report

    config = build_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    out = _out_dir(config)
    print(f"\n🚀 Study '{args.study}' over seeds {seeds}...")
    study = run_study(args.study, args.dataset, seeds, config)
    study.write(out)
    config.save(out / RUN_CONFIG_NAME)

    for row in study.report.summary.iter_rows(named=True):
        print(f"   {row['label']:>12}: AP {100 * row['AP']:.1f} | AP@.5 {100 * row['AP@.5']:.1f} "
              f"| AP@.75 {100 * row['AP@.75']:.1f} | AP@.9 {100 * row['AP@.9']:.1f}")
    checks = acceptance_checks(study.report, args.study)
    checks.write_csv(out / "checks.csv")
    for row in checks.iter_rows(named=True):
        print(f"   {'✅' if row['passed'] else '❌'} {row['check']} ({100 * row['value']:+.2f})")
    if args.html:
        html = write_html_report(study.report, out / "report.html", f"Study: {args.study}", study.loss_curves)
        print(f"   ✅ Report: {html}")
    print(f"   ✅ Saved: {out}/\n")


# =============================================================================
# ENTRY POINT
# =============================================================================

def _add_run_options(parser: argparse.ArgumentParser, out_default: str) -> None:
    parser.add_argument("--config", type=Path, help="JSON run configuration (flags override it)")
    parser.add_argument("--seed", type=int, help="Run seed; every random stream derives from it")
    parser.add_argument("-o", "--out", type=Path, default=Path(out_default), help=f"Output directory (default: {out_default})")


def _add_model_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--grid", choices=["2pt", "2x2", "3x3", "4x4", "5x5"], help="Grid point layout")
    parser.add_argument("--fusion", type=int, choices=[0, 1, 2], help="Feature fusion order")
    parser.add_argument("--mapping", choices=["plain", "extended", "enlarged"], help="Heatmap region mapping")
    parser.add_argument("--decode-mode", choices=["normalized", "literal"], help="Boundary averaging rule")


class _Parser(argparse.ArgumentParser):
    """Exits 1 on usage errors, the code of every other validation failure."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"❌ {self.prog}: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="gridloc",
        description="Grid-guided box localization on synthetic scenes",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  gridloc gen-data --out data/ --seed 0
  gridloc train --dataset data/ --head grid --grid 3x3 --fusion 2 -o runs/grid
  gridloc train --dataset data/ --head regression -o runs/reg
  gridloc eval --checkpoint runs/grid/checkpoint --dataset data/ -o runs/grid
  gridloc compare runs/reg/eval.json runs/grid/eval.json -o runs/compare --html
  gridloc ablate --study fusion --dataset data/ --seeds 0,1,2 -o runs/fusion

Environment:
  GRIDLOC_THREADS     cap BLAS/OpenMP worker threads
  GRIDLOC_LOG_LEVEL   root log level (default WARNING)
        """,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Log progress at INFO level")
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    gen = subparsers.add_parser("gen-data", help="Generate the synthetic dataset")
    _add_run_options(gen, "data")
    gen.add_argument("--train-count", type=int, help="Number of training scenes")
    gen.add_argument("--val-count", type=int, help="Number of validation scenes")
    gen.add_argument("--force", action="store_true", help="Overwrite a non-empty output directory")

    tr = subparsers.add_parser("train", help="Train a localization head")
    _add_run_options(tr, "runs/train")
    _add_model_options(tr)
    tr.add_argument("--dataset", type=Path, required=True, help="Dataset directory")
    tr.add_argument("--head", choices=["grid", "regression"], default="grid", help="Localization head")
    tr.add_argument("--epochs", type=int, help="Training epochs")
    tr.add_argument("--lr", type=float, help="Base learning rate")
    tr.add_argument("--batch-size", type=int, help="Scenes per batch")

    ev = subparsers.add_parser("eval", help="Evaluate a checkpoint or a detections file")
    _add_run_options(ev, "runs/eval")
    ev.add_argument("--checkpoint", type=Path, help="Checkpoint stem (without .json/.bin)")
    ev.add_argument("--dataset", type=Path, required=True, help="Dataset directory")
    ev.add_argument("--detections-file", type=Path, help="JSON list of detections to score instead of a model")
    ev.add_argument("--thresholds", default=None, help="IoU thresholds, start:stop:step or comma list (default 0.5:0.95:0.05)")
    ev.add_argument("--label", help="Run label stored in the result")
    ev.add_argument("--stem", default="eval", help="Output file stem (default: eval)")

    cmp_ = subparsers.add_parser("compare", help="Compare evaluation results (first is the baseline)")
    cmp_.add_argument("runs", nargs="+", type=Path, help="EvalResult JSON files")
    cmp_.add_argument("-o", "--out", type=Path, default=Path("runs/compare"), help="Output directory")
    cmp_.add_argument("--html", action="store_true", help="Also render an HTML report")

    dec = subparsers.add_parser("decode", help="Decode heatmaps into grid points and a box")
    dec.add_argument("blob", type=Path, help="Blob stem holding a 'heatmaps' tensor (n, H, W)")
    dec.add_argument("--roi", required=True, help="Proposal as JSON (inline or file)")
    dec.add_argument("--grid", default="3x3", choices=["2pt", "2x2", "3x3", "4x4", "5x5"], help="Grid point layout")
    dec.add_argument("--mode", choices=["normalized", "literal", "both"], default="both", help="Boundary averaging rule")
    dec.add_argument("--mapping", choices=["plain", "extended", "enlarged"], default="extended", help="Heatmap region mapping")
    dec.add_argument("-o", "--out", type=Path, help="Write the decoded result as JSON")
    dec.add_argument("--html", type=Path, help="Also save the heatmap panels as an HTML figure (path without suffix)")

    ins = subparsers.add_parser("inspect", help="Print a checkpoint or dataset manifest")
    ins.add_argument("path", type=Path, help="Checkpoint stem or dataset directory")

    cov = subparsers.add_parser("coverage", help="Grid point coverage per mapping")
    cov.add_argument("-n", type=int, default=10_000, help="Number of jittered proposals")
    cov.add_argument("--seed", type=int, default=0, help="Study seed")
    cov.add_argument("-o", "--out", type=Path, help="Output directory for CSV tables")
    cov.add_argument("--html", action="store_true", help="Also save the coverage figure")
    cov.add_argument("--png", action="store_true", help="Also export the coverage figure as PNG (needs kaleido)")

    abl = subparsers.add_parser("ablate", help="Train and compare the variants of a study")
    _add_run_options(abl, "runs/ablate")
    abl.add_argument("--study", choices=["heads", "points", "fusion", "mapping"], required=True)
    abl.add_argument("--dataset", type=Path, required=True, help="Dataset directory")
    abl.add_argument("--seeds", default="0,1,2", help="Comma-separated seeds (default: 0,1,2)")
    abl.add_argument("--epochs", type=int, help="Training epochs")
    abl.add_argument("--html", action="store_true", help="Also render an HTML report")

    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "decode": cmd_decode,
    "inspect": cmd_inspect,
    "coverage": cmd_coverage,
    "ablate": cmd_ablate,
}


def main(argv: Optional[list[str]] = None) -> int:
    """Main CLI entry point; returns the process exit code."""
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    configure_logging(args.verbose)

    if args.command is None:
        parser.print_help()
        return 0
    try:
        COMMANDS[args.command](args)
    except (ConfigError, InputError, ChecksumError, BlobFormatError, FileNotFoundError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return 1
    except (NumericError, PlacementError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
