"""Sliding-window inference and dataset evaluation.

One window of frames produces detections for its last frame only; a
sequence is covered by sliding the window one frame at a time.  The
evaluation path pairs each keyframe's post-NMS detections with its
annotated boxes and hands the pairs to the metrics module.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import torch

from .config import RunConfig
from .data import (DatasetError, FrameRecord, SequenceSample,
                   load_image_array, sliding_windows)
from .head import Detection, detections_from_output, nms
from .metrics import EvalReport, build_report
from .model import CrackDetector

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def _to_tensor(sample: SequenceSample, dtype, device) -> torch.Tensor:
    return torch.from_numpy(sample.frames).to(device=device, dtype=dtype)


def predict_samples(model: CrackDetector, samples: Sequence[SequenceSample],
                    config: RunConfig, device="cpu"
                    ) -> list[list[Detection]]:
    """Post-NMS detections per sample, in sample order."""
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    results: list[list[Detection]] = []
    try:
        with torch.no_grad():
            for start in range(0, len(samples), max(config.batch_size, 1)):
                chunk = samples[start:start + max(config.batch_size, 1)]
                batch = torch.stack([_to_tensor(s, dtype, device)
                                     for s in chunk])
                output = model(batch)
                for i in range(len(chunk)):
                    dets = detections_from_output(output.sample(i),
                                                  config.score_threshold)
                    results.append(nms(dets, config.nms_iou,
                                       config.score_threshold))
    finally:
        if was_training:
            model.train()
    return results


def evaluate_model(model: CrackDetector, records: Sequence[FrameRecord],
                   config: RunConfig, cover_all: bool = False,
                   device="cpu", extra: dict | None = None
                   ) -> tuple[EvalReport, list]:
    """Sliding-window inference + matching over a record list.

    Windowing matches training (one window per keyframe; `cover_all`
    additionally pads early keyframes).  Returns the report and the
    per-image (detections, ground truths) pairs behind it.
    """
    samples = list(sliding_windows(records, config.t_window,
                                   cover_all=cover_all))
    if not samples:
        raise DatasetError("no windows to evaluate: the split is empty")
    detections = predict_samples(model, samples, config, device)
    per_image = [(dets, list(sample.keyframe_boxes))
                 for dets, sample in zip(detections, samples)]
    report = build_report(per_image, config.match_iou, extra=extra)
    return report, per_image


def evaluate_detections(records: Sequence[FrameRecord],
                        per_record: Sequence[Sequence[Detection]],
                        config: RunConfig, cover_all: bool = False,
                        extra: dict | None = None) -> EvalReport:
    """Evaluate pre-computed detections (one list per record) against the
    keyframes that sliding windows would visit."""
    from .data import window_plan

    if len(per_record) != len(records):
        raise ValueError(
            f"{len(per_record)} detection lists for {len(records)} records"
        )
    slot_of = {(r.sequence_id, r.frame_index): i
               for i, r in enumerate(records)}
    plan = window_plan(records, config.t_window, cover_all=cover_all)
    if not plan:
        raise DatasetError("no windows to evaluate: the split is empty")
    per_image = []
    for window in plan:
        keyframe = window.records[-1]
        slot = slot_of[(keyframe.sequence_id, keyframe.frame_index)]
        per_image.append((list(per_record[slot]), list(keyframe.boxes)))
    return build_report(per_image, config.match_iou, extra=extra)


def detections_to_coco(per_sample: Sequence[Sequence[Detection]],
                       image_ids: Sequence[int]) -> list[dict]:
    """COCO results-format dicts (xywh boxes, one entry per detection)."""
    if len(per_sample) != len(image_ids):
        raise ValueError(
            f"{len(per_sample)} detection lists but {len(image_ids)} ids"
        )
    rows = []
    for image_id, dets in zip(image_ids, per_sample):
        for det in dets:
            x_min, y_min, x_max, y_max = det.box
            rows.append({
                "image_id": int(image_id),
                "category_id": det.class_id,
                "bbox": [x_min, y_min, x_max - x_min, y_max - y_min],
                "score": det.score,
            })
    return rows


def load_coco_results(results_path, annotations_path,
                      records: Sequence[FrameRecord]
                      ) -> list[list[Detection]]:
    """Read third-party detections in COCO results format.

    The annotation file supplies the image-id mapping; output lists are
    aligned with `records`.
    """
    with open(annotations_path) as fh:
        ann = json.load(fh)
    id_to_key = {}
    for image in ann.get("images", []):
        key = (str(image.get("sequence_id", "")), image.get("frame_index"),
               Path(image.get("file_name", "")).name)
        id_to_key[image["id"]] = key
    key_to_slot = {}
    for slot, record in enumerate(records):
        name = Path(record.image_path).name
        key_to_slot[(record.sequence_id, record.frame_index, name)] = slot
    with open(results_path) as fh:
        rows = json.load(fh)
    if not isinstance(rows, list):
        raise DatasetError(
            f"{results_path}: expected a JSON array of detection entries"
        )
    out: list[list[Detection]] = [[] for _ in records]
    for row in rows:
        image_id = row.get("image_id")
        if image_id not in id_to_key:
            raise DatasetError(
                f"{results_path}: image_id {image_id!r} not present in "
                f"{annotations_path}"
            )
        slot = key_to_slot.get(id_to_key[image_id])
        if slot is None:
            raise DatasetError(
                f"{results_path}: image_id {image_id!r} maps to "
                f"{id_to_key[image_id]} which is not among the evaluated "
                f"frames"
            )
        x, y, w, h = row["bbox"]
        out[slot].append(Detection(
            box=(float(x), float(y), float(x) + float(w), float(y) + float(h)),
            objectness=float(row["score"]),
            class_score=1.0,
            class_id=int(row.get("category_id", 0)),
        ))
    return out


def list_frame_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"not a directory: {directory}")
    files = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetError(f"no image files found under {directory}")
    return files


def records_from_directory(directory) -> list[FrameRecord]:
    """Treat a directory of images (sorted by name) as one sequence."""
    from PIL import Image

    directory = Path(directory)
    records = []
    for index, path in enumerate(list_frame_files(directory)):
        try:
            with Image.open(path) as img:
                width, height = img.size
        except OSError as exc:
            raise DatasetError(f"cannot read image {path}: {exc}") from exc
        records.append(FrameRecord(
            sequence_id=directory.name, frame_index=index,
            image_path=str(path), width=width, height=height, boxes=(),
        ))
    return records


def infer_directory(model: CrackDetector, directory, config: RunConfig,
                    out_dir, heatmaps: bool = False, device="cpu") -> Path:
    """Run every keyframe of a frame directory; write detections JSON
    (and optional heatmap PNGs) under `out_dir`; return the JSON path.
    """
    from .plots import render_heatmap

    records = records_from_directory(directory)
    samples = list(sliding_windows(records, config.t_window,
                                   load_image=load_image_array,
                                   cover_all=True))
    detections = predict_samples(model, samples, config, device)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = []
    for sample, dets in zip(samples, detections):
        record = records[sample.keyframe_index]
        frame_entry = {
            "sequence_id": sample.sequence_id,
            "frame_index": sample.keyframe_index,
            "file_name": Path(record.image_path).name,
            "detections": [
                {
                    "bbox_xyxy": list(det.box),
                    "objectness": det.objectness,
                    "class_score": det.class_score,
                    "score": det.score,
                    "category_id": det.class_id,
                }
                for det in dets
            ],
        }
        payload.append(frame_entry)
    json_path = out_dir / "detections.json"
    json_path.write_text(json.dumps(payload, indent=1))
    if heatmaps:
        dtype = next(model.parameters()).dtype
        with torch.no_grad():
            for sample in samples:
                frames = torch.from_numpy(sample.frames).to(dtype=dtype)
                output = model(frames)
                render_heatmap(
                    output, sample.frames[-1],
                    out_dir / f"heatmap_{sample.keyframe_index:05d}.png",
                )
    return json_path
