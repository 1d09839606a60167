"""Training: seeded SGD with momentum and a cosine learning-rate
schedule, per-step loss logging to CSV, and checkpointing.

The whole run is a pure function of (config, dataset, seed) on a single
device: initialization, shuffling, and batching all draw from seeded
generators, and log floats are written with full precision via repr, so
two identical runs produce byte-identical logs.
"""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig, config_hash, resolve_device
from .data import DatasetError, load_dataset, sliding_windows
from .head import assign_targets
from .losses import LossWeights, total_loss
from .model import CrackDetector, save_checkpoint
from .pipeline import evaluate_model

LOG_COLUMNS = ("step", "epoch", "lr", "total", "reg", "iou", "nwd", "cls",
               "obj", "num_positive")


class TrainingError(RuntimeError):
    """Raised when optimization cannot continue (for example NaN loss)."""


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    manifest_path: Path
    steps: int
    final_loss: float
    report_path: Path | None


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Annealed rate for 0-based `step` out of `total_steps`."""
    if total_steps <= 1:
        return base_lr
    progress = step / (total_steps - 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def loss_weights_from(config: RunConfig) -> LossWeights:
    return LossWeights(
        reg_weight=config.reg_weight,
        cls_weight=config.cls_weight,
        obj_weight=config.obj_weight,
        iou_weight=config.iou_weight,
        nwd_weight=config.nwd_weight,
        nwd_constant=config.nwd_constant,
        focal_alpha=config.focal_alpha,
        focal_gamma=config.focal_gamma,
    )


def _format(value: float) -> str:
    return repr(float(value))


def train(config: RunConfig, run_dir) -> TrainResult:
    """Run the configured training job under `run_dir`.

    Writes manifest.json, train_log.csv, model.pt, and (when a split is
    available) eval_report.json for the validation split, falling back
    to the training split so every run ends with metrics.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    device = resolve_device()
    dtype = torch.float64 if config.float64 else torch.float32

    if not config.train_annotations:
        raise DatasetError("config.train_annotations is required for training")
    dataset = load_dataset(config.train_annotations,
                           config.image_root or None)
    samples = list(sliding_windows(dataset.records, config.t_window))
    if not samples:
        raise DatasetError("training split produced no windows")
    for sample in samples:
        h, w = sample.frames.shape[-2:]
        if (h, w) != (config.input_size, config.input_size):
            raise DatasetError(
                f"frame size {h}x{w} in sequence '{sample.sequence_id}' does "
                f"not match config.input_size {config.input_size}"
            )

    seed_everything(config.seed)
    model = CrackDetector(**config.model_kwargs()).to(device=device,
                                                      dtype=dtype)
    model.train()
    grid = config.input_size // config.stride
    frames = [torch.from_numpy(s.frames).to(device=device, dtype=dtype)
              for s in samples]
    targets = [assign_targets(s.keyframe_boxes, grid, grid, config.stride,
                              radius=config.assign_radius, dtype=dtype,
                              device=device)
               for s in samples]

    optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate,
                                momentum=config.momentum,
                                weight_decay=config.weight_decay)
    weights = loss_weights_from(config)
    steps_per_epoch = math.ceil(len(samples) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps:
        total_steps = min(total_steps, config.max_steps)

    manifest_path = run_dir / "manifest.json"
    manifest_path.write_text(json.dumps({
        "package_version": __version__,
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "seed": config.seed,
        "device": device,
        "dtype": str(dtype),
        "num_windows": len(samples),
        "total_steps": total_steps,
    }, indent=1, sort_keys=True))

    log_path = run_dir / "train_log.csv"
    checkpoint_path = run_dir / "model.pt"
    shuffler = torch.Generator().manual_seed(config.seed)
    step = 0
    final_loss = math.nan
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        done = False
        for epoch in range(config.epochs):
            if done:
                break
            order = torch.randperm(len(samples), generator=shuffler).tolist()
            for start in range(0, len(order), config.batch_size):
                if step >= total_steps:
                    done = True
                    break
                idx = order[start:start + config.batch_size]
                batch = torch.stack([frames[i] for i in idx])
                batch_targets = [targets[i] for i in idx]
                lr = cosine_lr(config.learning_rate, step, total_steps)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                output = model(batch)
                breakdown = total_loss(output, batch_targets, weights)
                scalars = breakdown.scalars()
                if not math.isfinite(scalars["total"]):
                    raise TrainingError(
                        f"non-finite loss at step {step}: {scalars}"
                    )
                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()
                writer.writerow(
                    [step, epoch, _format(lr)]
                    + [_format(scalars[k]) for k in LOG_COLUMNS[3:]]
                )
                final_loss = scalars["total"]
                step += 1

    save_checkpoint(model, checkpoint_path, extra={
        "config_hash": config_hash(config),
        "steps": step,
        "package_version": __version__,
    })

    report_path: Path | None = None
    eval_annotations = config.val_annotations or config.train_annotations
    if eval_annotations:
        eval_ds = (dataset if eval_annotations == config.train_annotations
                   else load_dataset(eval_annotations,
                                     config.image_root or None))
        split = ("val" if config.val_annotations else "train")
        report, _ = evaluate_model(model, eval_ds.records, config,
                                   device=device,
                                   extra={"split": split,
                                          "config_hash": config_hash(config)})
        report_path = run_dir / "eval_report.json"
        report_path.write_text(report.to_json(indent=1))

    return TrainResult(
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        manifest_path=manifest_path,
        steps=step,
        final_loss=final_loss,
        report_path=report_path,
    )
