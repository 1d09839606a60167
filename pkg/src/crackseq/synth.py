"""Synthetic moving-belt sequences with exact crack box annotations.

The generator renders a textured belt strip translating at a constant
speed along +x.  Cracks are dark jagged polygons attached to the strip,
so their bounding boxes move by exactly ``belt_speed`` pixels per frame
(before clamping at the image border).  Everything is drawn from a
single seeded RNG, making output byte-identical for a given seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import CrackDataset, FrameRecord, GroundTruthBox, save_dataset


class SynthError(ValueError):
    """Raised for synthesis configs that cannot be rendered."""


@dataclass(frozen=True)
class SynthConfig:
    width: int = 64
    height: int = 64
    num_frames: int = 20
    belt_speed: float = 3.0  # pixels per frame along +x
    crack_count: int = 2  # target cracks visible per frame
    crack_length: tuple[float, float] = (16.0, 32.0)
    crack_thickness: tuple[float, float] = (4.0, 7.0)
    noise_level: float = 0.02
    texture_density: float = 0.3
    sequence_id: str = "belt000"

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise SynthError("frame size must be positive")
        if self.num_frames < 1:
            raise SynthError("need at least one frame")
        if self.belt_speed < 0:
            raise SynthError("belt speed must be >= 0")
        if self.crack_count < 0:
            raise SynthError("crack count must be >= 0")
        lo, hi = self.crack_length
        if not (0 < lo <= hi):
            raise SynthError("crack length range must be positive and ordered")
        tlo, thi = self.crack_thickness
        if not (0 < tlo <= thi):
            raise SynthError("crack thickness range must be positive and ordered")
        # A crack's bounding box is at most (length + thickness) on a side.
        if hi + thi > min(self.width, self.height):
            raise SynthError(
                f"crack (up to {hi + thi:.0f}px) larger than frame "
                f"{self.width}x{self.height}"
            )
        if not (0 <= self.noise_level < 0.5):
            raise SynthError("noise level must be in [0, 0.5)")
        if not (0 <= self.texture_density <= 1):
            raise SynthError("texture density must be in [0, 1]")


@dataclass(frozen=True)
class _Crack:
    vertices: np.ndarray  # (n, 2) float polygon in strip coordinates
    shade: float

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        xs, ys = self.vertices[:, 0], self.vertices[:, 1]
        return float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max())


def _make_crack(rng: np.random.Generator, cfg: SynthConfig, x_center: float) -> _Crack:
    """A jagged elongated polygon: tapered strip around a noisy centerline."""
    length = rng.uniform(*cfg.crack_length)
    thickness = rng.uniform(*cfg.crack_thickness)
    angle = rng.uniform(0, math.pi)
    margin = (length + thickness) / 2 + 1
    y_hi = cfg.height - margin
    y_center = rng.uniform(margin, y_hi) if y_hi > margin else cfg.height / 2
    direction = np.array([math.cos(angle), math.sin(angle)])
    normal = np.array([-direction[1], direction[0]])
    n_pts = 5
    ts = np.linspace(-0.5, 0.5, n_pts)
    jitter = rng.uniform(-0.12, 0.12, size=n_pts) * thickness
    center = np.array([x_center, y_center])
    spine = center + np.outer(ts * length, direction) + np.outer(jitter, normal)
    taper = np.array([0.25, 0.85, 1.0, 0.85, 0.25]) * thickness / 2
    upper = spine + np.outer(taper, normal)
    lower = (spine - np.outer(taper, normal))[::-1]
    return _Crack(
        vertices=np.concatenate([upper, lower]),
        shade=float(rng.uniform(0.03, 0.12)),
    )


def _belt_texture(rng: np.random.Generator, cfg: SynthConfig, strip_width: int) -> np.ndarray:
    """Static texture for the full strip: lateral streaks plus specks."""
    base = 0.55 + 0.05 * rng.standard_normal()
    strip = np.full((cfg.height, strip_width), base, dtype=np.float64)
    # Streaks running along the belt direction (one brightness per row band).
    n_bands = max(2, cfg.height // 8)
    band_vals = rng.uniform(-0.06, 0.06, size=n_bands)
    rows = np.linspace(0, n_bands, cfg.height, endpoint=False).astype(int)
    strip += band_vals[rows][:, None]
    # Sparse dark/light specks controlled by texture_density.
    n_specks = int(cfg.texture_density * cfg.height * strip_width / 40)
    if n_specks:
        ys = rng.integers(0, cfg.height, size=n_specks)
        xs = rng.integers(0, strip_width, size=n_specks)
        vals = rng.uniform(-0.12, 0.12, size=n_specks)
        strip[ys, xs] += vals
    return strip


def synth_sequence(cfg: SynthConfig, seed: int):
    """Render a sequence; returns (frame records, images (N, 3, H, W) float32).

    Frame f shows strip coordinates shifted so belt content moves by
    exactly ``belt_speed`` pixels per frame in +x.  Box annotations are
    computed from the polygon vertices, so they follow the same motion
    model exactly (then clamp at the frame border).
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    travel = cfg.belt_speed * (cfg.num_frames - 1)
    strip_width = cfg.width + int(math.ceil(travel))
    strip = _belt_texture(rng, cfg, strip_width)

    # Strip x in [0, strip_width); frame f shows [travel - f*speed, + width).
    n_cracks = int(round(cfg.crack_count * strip_width / cfg.width))
    margin = (cfg.crack_length[1] + cfg.crack_thickness[1]) / 2 + 1
    x_hi = max(strip_width - margin, margin)
    cracks = [
        _make_crack(rng, cfg, x_center=rng.uniform(margin, x_hi))
        for _ in range(n_cracks)
    ]

    records = []
    images = np.empty((cfg.num_frames, 3, cfg.height, cfg.width), dtype=np.float32)
    for f in range(cfg.num_frames):
        offset = travel - cfg.belt_speed * f
        view = np.array(strip[:, int(round(offset)) : int(round(offset)) + cfg.width])
        view = view[:, : cfg.width]
        if view.shape[1] < cfg.width:  # guard against rounding at the end
            view = np.pad(view, ((0, 0), (0, cfg.width - view.shape[1])), mode="edge")

        canvas = Image.fromarray((np.clip(view, 0, 1) * 255).astype(np.uint8), mode="L")
        draw = ImageDraw.Draw(canvas)
        boxes = []
        for crack in cracks:
            x0, y0, x1, y1 = crack.bbox
            shifted = [(x - offset, y) for x, y in crack.vertices]
            if x1 - offset < 0 or x0 - offset > cfg.width:
                continue
            draw.polygon(shifted, fill=int(round(crack.shade * 255)))
            box = GroundTruthBox(x0 - offset, y0, x1 - offset, y1).clamped(
                cfg.width, cfg.height
            )
            if box is not None:
                boxes.append(box)

        frame = np.asarray(canvas, dtype=np.float32) / 255.0
        if cfg.noise_level > 0:
            frame = frame + rng.normal(0, cfg.noise_level, size=frame.shape)
            frame = np.clip(frame, 0.0, 1.0).astype(np.float32)
        images[f] = frame[None, :, :]

        records.append(
            FrameRecord(
                sequence_id=cfg.sequence_id,
                frame_index=f,
                image_path=Path(f"images/{cfg.sequence_id}_{f:04d}.png"),
                width=cfg.width,
                height=cfg.height,
                boxes=tuple(boxes),
            )
        )
    return records, images


def write_synthetic_dataset(cfg: SynthConfig, seed: int, out_dir,
                            sequences: int = 1) -> Path:
    """Render one or more sequences to disk in the ingest layout.

    With ``sequences > 1``, sequence ids get a numeric suffix and each
    sequence draws from its own seed (``seed + i``).  Returns the path
    of the written annotation file.
    """
    if sequences < 1:
        raise SynthError(f"need at least one sequence, got {sequences}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    resolved = []
    for i in range(sequences):
        seq_cfg = cfg if sequences == 1 else replace(
            cfg, sequence_id=f"{cfg.sequence_id}_{i:03d}"
        )
        records, images = synth_sequence(seq_cfg, seed + i)
        for rec, img in zip(records, images):
            path = out_dir / rec.image_path
            arr = ((np.clip(img, 0, 1) * 255).round().astype(np.uint8)
                   .transpose(1, 2, 0))
            Image.fromarray(arr, mode="RGB").save(path)
            resolved.append(
                FrameRecord(
                    sequence_id=rec.sequence_id,
                    frame_index=rec.frame_index,
                    image_path=path,
                    width=rec.width,
                    height=rec.height,
                    boxes=rec.boxes,
                )
            )
    dataset = CrackDataset(records=resolved, image_root=out_dir)
    annotation_path = out_dir / "annotations.json"
    save_dataset(dataset, annotation_path)
    return annotation_path
