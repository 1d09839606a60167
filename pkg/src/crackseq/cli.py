"""Command-line interface.

Verbs: ``synth`` (generate a dataset), ``train``, ``eval``, ``infer``,
``plot-pr``, and ``cost``.  Every verb accepts ``--config`` (a flat TOML
file) plus ``--set key=value`` overrides; validation failures exit
nonzero with a message on stderr.  The compute device comes from the
``CRACKSEQ_DEVICE`` environment variable (default cpu).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, config_hash, load_config, resolve_device
from .data import DatasetError, load_dataset
from .metrics import validate_report
from .model import (CrackDetector, count_macs, count_parameters,
                    load_checkpoint, measure_fps)
from .pipeline import (evaluate_detections, evaluate_model, infer_directory,
                       load_coco_results)
from .plots import plot_loss_curves, plot_pr_curve
from .synth import SynthConfig, SynthError, write_synthetic_dataset
from .train import TrainingError, train


def _add_config_args(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, default=None,
                        help="flat TOML run configuration")
    parser.add_argument("--set", dest="overrides", action="append",
                        default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")


def _write_report_files(report, out_dir: Path) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    report_dict = report.to_dict()
    validate_report(report_dict)
    paths = {
        "report": out_dir / "eval_report.json",
        "pr_csv": out_dir / "pr_points.csv",
        "pr_png": out_dir / "pr_curve.png",
    }
    paths["report"].write_text(json.dumps(report_dict, indent=1,
                                          sort_keys=True))
    with open(paths["pr_csv"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recall", "precision"])
        for recall, precision in report.pr_points:
            writer.writerow([repr(recall), repr(precision)])
    plot_pr_curve(report.pr_points, paths["pr_png"])
    return paths


def _print_report(report):
    print(f"ap50 {report.ap50:.4f}  precision {report.precision:.4f}  "
          f"recall {report.recall:.4f}  f1 {report.f1:.4f}  "
          f"@ threshold {report.operating_threshold:.6f}")
    print(f"operating rule: {report.operating_rule}")


def cmd_train(args) -> int:
    config = load_config(args.config, args.overrides)
    result = train(config, args.run_dir)
    print(f"trained {result.steps} steps; final loss {result.final_loss!r}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    if result.report_path is not None:
        print(f"report: {result.report_path}")
    if args.plot_loss:
        with open(result.log_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        path = plot_loss_curves(rows, Path(args.run_dir) / "loss_curves.png")
        print(f"loss plot: {path}")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config, args.overrides)
    annotations = (config.val_annotations if args.split == "val"
                   else config.train_annotations)
    if not annotations:
        raise ConfigError(f"no annotation file configured for split "
                          f"'{args.split}'")
    dataset = load_dataset(annotations, config.image_root or None)
    extra = {"split": args.split, "config_hash": config_hash(config)}
    if args.results:
        detections = load_coco_results(args.results, annotations,
                                       dataset.records)
        extra["detections_from"] = str(args.results)
        report = evaluate_detections(dataset.records, detections, config,
                                     cover_all=args.cover_all, extra=extra)
    else:
        if not args.checkpoint:
            raise ConfigError("either --checkpoint or --results is required")
        device = resolve_device()
        model, _ = load_checkpoint(args.checkpoint, map_location=device)
        extra["checkpoint"] = str(args.checkpoint)
        report, _ = evaluate_model(model, dataset.records, config,
                                   cover_all=args.cover_all, device=device,
                                   extra=extra)
    paths = _write_report_files(report, Path(args.out))
    _print_report(report)
    print(f"report: {paths['report']}")
    return 0


def cmd_infer(args) -> int:
    config = load_config(args.config, args.overrides)
    device = resolve_device()
    model, _ = load_checkpoint(args.checkpoint, map_location=device)
    json_path = infer_directory(model, args.frames, config, args.out,
                                heatmaps=args.heatmaps, device=device)
    print(f"detections: {json_path}")
    return 0


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        width=args.width, height=args.height, num_frames=args.frames,
        belt_speed=args.speed, crack_count=args.cracks,
        noise_level=args.noise, texture_density=args.texture,
        sequence_id=args.sequence_id,
    )
    path = write_synthetic_dataset(cfg, args.seed, args.out,
                                   sequences=args.sequences)
    print(f"annotations: {path}")
    return 0


def cmd_plot_pr(args) -> int:
    if args.report:
        report = json.loads(Path(args.report).read_text())
        points = [(float(r), float(p)) for r, p in report["pr_points"]]
    else:
        with open(args.csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
        points = [(float(row["recall"]), float(row["precision"]))
                  for row in rows]
    path = plot_pr_curve(points, args.out)
    print(f"plot: {path}")
    return 0


def cmd_cost(args) -> int:
    config = load_config(args.config, args.overrides)
    model = CrackDetector(**config.model_kwargs())
    model.eval()
    params = count_parameters(model)
    macs, per_layer = count_macs(model, config.input_size)
    fps = measure_fps(model, config.input_size,
                      iterations=args.fps_iterations)
    print(f"parameters: {params:,}")
    print(f"multiply-adds per {config.input_size}x{config.input_size} "
          f"window: {macs:,}")
    print(f"windows per second (cpu wall clock): {fps:.2f}")
    if args.json:
        Path(args.json).write_text(json.dumps({
            "parameters": params,
            "multiply_adds": macs,
            "fps": fps,
            "per_layer_multiply_adds": per_layer,
        }, indent=1, sort_keys=True))
        print(f"wrote {args.json}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crackseq",
        description="Sequential-image conveyor-belt crack detection.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    _add_config_args(p)
    p.add_argument("--run-dir", type=Path, required=True,
                   help="output directory for logs and checkpoints")
    p.add_argument("--plot-loss", action="store_true",
                   help="also render loss curves from the training log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or results file")
    _add_config_args(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--results", type=Path, default=None,
                   help="COCO-style results JSON to evaluate instead of a "
                        "checkpoint")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--cover-all", action="store_true",
                   help="pad early keyframes so every frame is evaluated")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run inference over a frame directory")
    _add_config_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--frames", type=Path, required=True,
                   help="directory of ordered frame images")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--heatmaps", action="store_true",
                   help="write one confidence heatmap PNG per keyframe")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synth", help="generate a synthetic belt dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sequences", type=int, default=1)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--speed", type=float, default=3.0)
    p.add_argument("--cracks", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--texture", type=float, default=0.3)
    p.add_argument("--sequence-id", default="belt")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("plot-pr", help="render a PR curve from a report "
                                       "JSON or points CSV")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--report", type=Path)
    group.add_argument("--csv", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_plot_pr)

    p = sub.add_parser("cost", help="parameter/multiply-add/fps summary")
    _add_config_args(p)
    p.add_argument("--json", type=Path, default=None,
                   help="also write the summary as JSON")
    p.add_argument("--fps-iterations", type=int, default=10)
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, SynthError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
