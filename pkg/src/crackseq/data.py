"""Sequence dataset model: boxes, frame records, COCO-style IO, windowing.

Annotations are COCO-style JSON extended with two per-image fields,
``sequence_id`` (string) and ``frame_index`` (int).  Files missing either
field are treated as single-image data (every image becomes its own
one-frame sequence) and flagged on the loaded dataset.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

CRACK_CLASS_ID = 0
CRACK_CLASS_NAME = "crack"

# Area edges (pixels^2) between the tiny/small/medium/large/huge buckets.
BUCKET_EDGES = (100.0, 1_000.0, 10_000.0, 100_000.0)


class DatasetError(ValueError):
    """Raised for malformed or inconsistent annotation data."""


@dataclass(frozen=True)
class SizeBucket:
    """Half-open area range [lower, upper) with a canonical name."""

    name: str
    lower: float
    upper: float

    def contains(self, area: float) -> bool:
        return self.lower <= area < self.upper


SIZE_BUCKETS = (
    SizeBucket("tiny", 0.0, BUCKET_EDGES[0]),
    SizeBucket("small", BUCKET_EDGES[0], BUCKET_EDGES[1]),
    SizeBucket("medium", BUCKET_EDGES[1], BUCKET_EDGES[2]),
    SizeBucket("large", BUCKET_EDGES[2], BUCKET_EDGES[3]),
    SizeBucket("huge", BUCKET_EDGES[3], float("inf")),
)


def bucket_for_area(area: float) -> SizeBucket:
    """Map a box area to its unique size bucket."""
    if area < 0:
        raise ValueError(f"negative area: {area}")
    for bucket in SIZE_BUCKETS:
        if bucket.contains(area):
            return bucket
    raise AssertionError("buckets must cover [0, inf)")


@dataclass(frozen=True)
class GroundTruthBox:
    """Axis-aligned annotation box in image pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = CRACK_CLASS_ID

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise DatasetError(
                f"box has non-positive extent: "
                f"[{self.x_min}, {self.y_min}, {self.x_max}, {self.y_max}]"
            )

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def bucket(self) -> SizeBucket:
        return bucket_for_area(self.area)

    def clamped(self, width: float, height: float) -> "GroundTruthBox | None":
        """Clamp to image bounds; None if the box degenerates."""
        x0 = min(max(self.x_min, 0.0), width)
        y0 = min(max(self.y_min, 0.0), height)
        x1 = min(max(self.x_max, 0.0), width)
        y1 = min(max(self.y_max, 0.0), height)
        if x1 <= x0 or y1 <= y0:
            return None
        return replace(self, x_min=x0, y_min=y0, x_max=x1, y_max=y1)

    def as_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max - self.x_min, self.y_max - self.y_min]

    def as_xyxy(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class FrameRecord:
    """One annotated frame of a sequence."""

    sequence_id: str
    frame_index: int
    image_path: Path
    width: int
    height: int
    boxes: tuple[GroundTruthBox, ...] = ()

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DatasetError(
                f"frame {self.sequence_id}/{self.frame_index}: "
                f"non-positive size {self.width}x{self.height}"
            )
        if self.frame_index < 0:
            raise DatasetError(
                f"frame {self.sequence_id}: negative frame_index {self.frame_index}"
            )


@dataclass
class CrackDataset:
    """Loaded annotation set, grouped by sequence and sorted by frame."""

    records: list[FrameRecord]
    image_root: Path
    single_image_mode: bool = False
    dropped_boxes: int = 0

    def by_sequence(self) -> dict[str, list[FrameRecord]]:
        out: dict[str, list[FrameRecord]] = {}
        for rec in self.records:
            out.setdefault(rec.sequence_id, []).append(rec)
        return out

    def __len__(self) -> int:
        return len(self.records)


def load_dataset(annotation_file, image_root=None, check_images: bool = True) -> CrackDataset:
    """Load COCO-style annotations extended with sequence metadata.

    Boxes are clamped to image bounds; boxes that degenerate are dropped
    and counted in ``dropped_boxes``.  A missing image file is a hard
    error naming the path; duplicate (sequence_id, frame_index) pairs are
    a hard error.
    """
    annotation_file = Path(annotation_file)
    image_root = Path(image_root) if image_root is not None else annotation_file.parent
    with open(annotation_file) as fh:
        raw = json.load(fh)
    for key in ("images", "annotations"):
        if key not in raw:
            raise DatasetError(f"{annotation_file}: missing top-level '{key}'")

    single_image_mode = any(
        "sequence_id" not in img or "frame_index" not in img for img in raw["images"]
    )
    if single_image_mode and raw["images"]:
        log.warning(
            "%s: images lack sequence_id/frame_index; treating as single-image "
            "data (window size forced to 1)",
            annotation_file,
        )

    boxes_by_image: dict[object, list[GroundTruthBox]] = {}
    dropped = 0
    sizes = {img["id"]: (img["width"], img["height"]) for img in raw["images"]}
    for ann in raw["annotations"]:
        image_id = ann["image_id"]
        if image_id not in sizes:
            raise DatasetError(f"annotation {ann.get('id')} references unknown image {image_id}")
        x, y, w, h = ann["bbox"]
        if w <= 0 or h <= 0:
            dropped += 1
            continue
        box = GroundTruthBox(x, y, x + w, y + h, class_id=int(ann.get("category_id", 0)))
        clamped = box.clamped(*sizes[image_id])
        if clamped is None:
            dropped += 1
            continue
        boxes_by_image.setdefault(image_id, []).append(clamped)
    if dropped:
        log.warning("%s: dropped %d degenerate box(es)", annotation_file, dropped)

    records = []
    seen: set[tuple[str, int]] = set()
    for idx, img in enumerate(raw["images"]):
        if single_image_mode:
            seq_id = f"image-{img['id']}"
            frame_index = 0
        else:
            seq_id = str(img["sequence_id"])
            frame_index = int(img["frame_index"])
        key = (seq_id, frame_index)
        if key in seen:
            raise DatasetError(f"duplicate (sequence_id, frame_index) = {key}")
        seen.add(key)
        path = image_root / img["file_name"]
        if check_images and not path.is_file():
            raise DatasetError(f"missing image file: {path}")
        records.append(
            FrameRecord(
                sequence_id=seq_id,
                frame_index=frame_index,
                image_path=path,
                width=int(img["width"]),
                height=int(img["height"]),
                boxes=tuple(boxes_by_image.get(img["id"], ())),
            )
        )
    records.sort(key=lambda r: (r.sequence_id, r.frame_index))
    return CrackDataset(
        records=records,
        image_root=image_root,
        single_image_mode=single_image_mode,
        dropped_boxes=dropped,
    )


def save_dataset(dataset: CrackDataset, annotation_file) -> None:
    """Write annotations back out in canonical order.

    Image and annotation ids are reassigned sequentially so that
    load -> save -> load is a fixpoint (byte-identical on re-save).
    """
    annotation_file = Path(annotation_file)
    records = sorted(dataset.records, key=lambda r: (r.sequence_id, r.frame_index))
    images = []
    annotations = []
    ann_id = 1
    for img_id, rec in enumerate(records, start=1):
        try:
            file_name = rec.image_path.relative_to(dataset.image_root).as_posix()
        except ValueError:
            file_name = rec.image_path.as_posix()
        images.append(
            {
                "id": img_id,
                "file_name": file_name,
                "width": rec.width,
                "height": rec.height,
                "sequence_id": rec.sequence_id,
                "frame_index": rec.frame_index,
            }
        )
        for box in sorted(rec.boxes, key=lambda b: b.as_xyxy()):
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": img_id,
                    "category_id": box.class_id,
                    "bbox": box.as_xywh(),
                    "area": box.area,
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    payload = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": CRACK_CLASS_ID, "name": CRACK_CLASS_NAME}],
    }
    annotation_file.parent.mkdir(parents=True, exist_ok=True)
    with open(annotation_file, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class WindowSpec:
    """A planned window: T frame records, keyframe last."""

    sequence_id: str
    keyframe_index: int
    records: tuple[FrameRecord, ...]


def window_plan(records, t_window: int, cover_all: bool = False) -> list[WindowSpec]:
    """Plan sliding windows over grouped, sorted frame records.

    A sequence of length L >= T yields L - T + 1 windows.  Shorter
    sequences are head-padded by repeating their first frame so every
    frame still serves as a keyframe once.  With ``cover_all`` the
    head-padding is also applied to the first T - 1 keyframes of long
    sequences (inference over every frame).
    """
    if t_window < 1:
        raise ValueError(f"window size must be >= 1, got {t_window}")
    by_seq: dict[str, list[FrameRecord]] = {}
    for rec in records:
        by_seq.setdefault(rec.sequence_id, []).append(rec)
    windows = []
    for seq_id in sorted(by_seq):
        frames = sorted(by_seq[seq_id], key=lambda r: r.frame_index)
        length = len(frames)
        if length == 0:
            continue
        first_key = 0 if (length < t_window or cover_all) else t_window - 1
        for key in range(first_key, length):
            start = key - t_window + 1
            if start < 0:
                chosen = (frames[0],) * (-start) + tuple(frames[: key + 1])
            else:
                chosen = tuple(frames[start : key + 1])
            windows.append(
                WindowSpec(
                    sequence_id=seq_id,
                    keyframe_index=frames[key].frame_index,
                    records=chosen,
                )
            )
    return windows


@dataclass
class SequenceSample:
    """A loaded window: T frames plus the keyframe annotations."""

    frames: np.ndarray  # (T, 3, H, W) float32 in [0, 1]
    keyframe_boxes: tuple[GroundTruthBox, ...]
    sequence_id: str
    keyframe_index: int

    @property
    def t_window(self) -> int:
        return self.frames.shape[0]


def load_image_array(path) -> np.ndarray:
    """Read an image file as float32 (3, H, W) in [0, 1]."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DatasetError(f"unreadable image file: {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def sliding_windows(records, t_window: int, load_image=load_image_array, cover_all: bool = False):
    """Yield SequenceSamples for every planned window.

    Frames within one window must agree on image size; windows never mix
    sequence ids.  ``load_image`` is injectable for tests.
    """
    cache_key = None
    cache_val = None
    for spec in window_plan(records, t_window, cover_all=cover_all):
        frames = []
        for rec in spec.records:
            if cache_key != rec.image_path:
                cache_key = rec.image_path
                cache_val = load_image(rec.image_path)
            frames.append(cache_val)
        shapes = {f.shape for f in frames}
        if len(shapes) != 1:
            raise DatasetError(
                f"window {spec.sequence_id}@{spec.keyframe_index} mixes image sizes: {shapes}"
            )
        yield SequenceSample(
            frames=np.stack(frames),
            keyframe_boxes=spec.records[-1].boxes,
            sequence_id=spec.sequence_id,
            keyframe_index=spec.keyframe_index,
        )
