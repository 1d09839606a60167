"""Anchor-free detection head with decoupled stems, plus NMS and
training-time target assignment.

Decode convention, fixed here once: a cell (i, j) of the prediction grid
owns the pixel point ((j+0.5)*stride, (i+0.5)*stride).  The four raw
regression channels (dx, dy, dw, dh) decode to a box centered at
((j+0.5+dx)*stride, (i+0.5+dy)*stride) with size (exp(dw)*stride,
exp(dh)*stride), so all-zero regression yields a stride-sized box on the
cell center.  ``encode_boxes`` is the algebraic inverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .backbone import ConvNormAct, ensure_batch
from .data import GroundTruthBox


@dataclass(frozen=True)
class Detection:
    """One predicted box with its confidence components."""

    box: tuple[float, float, float, float]
    objectness: float
    class_score: float
    class_id: int = 0

    @property
    def score(self) -> float:
        return self.objectness * self.class_score

    @property
    def area(self) -> float:
        x_min, y_min, x_max, y_max = self.box
        return max(x_max - x_min, 0.0) * max(y_max - y_min, 0.0)


@dataclass
class HeadOutput:
    """Raw head maps; reg (4,h,w), obj (1,h,w), cls (n_cls,h,w), each
    optionally with a leading batch axis."""

    reg: torch.Tensor
    obj: torch.Tensor
    cls: torch.Tensor
    stride: int

    @property
    def batched(self) -> bool:
        return self.reg.dim() == 4

    def sample(self, index: int) -> "HeadOutput":
        if not self.batched:
            raise ValueError("output is not batched")
        return HeadOutput(self.reg[index], self.obj[index], self.cls[index],
                          self.stride)


@dataclass
class AssignedTargets:
    """Per-cell supervision for one sample."""

    obj: torch.Tensor        # (h, w) float, 1 on positive cells
    reg: torch.Tensor        # (4, h, w) float, encoded boxes, 0 elsewhere
    positive: torch.Tensor   # (h, w) bool
    gt_index: torch.Tensor   # (h, w) long, -1 where negative
    boxes: tuple[GroundTruthBox, ...] = field(default=())

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum().item())


class DetectionHead(nn.Module):
    """Two conv stems (classification/objectness vs regression) over the
    fused map, each ending in 1x1 predictors."""

    def __init__(self, channels: int, stride: int, num_classes: int = 1,
                 prior: float = 0.01):
        super().__init__()
        self.stride = stride
        self.num_classes = num_classes
        self.cls_stem = nn.Sequential(
            ConvNormAct(channels, channels), ConvNormAct(channels, channels)
        )
        self.reg_stem = nn.Sequential(
            ConvNormAct(channels, channels), ConvNormAct(channels, channels)
        )
        self.cls_pred = nn.Conv2d(channels, num_classes, 1)
        self.obj_pred = nn.Conv2d(channels, 1, 1)
        self.reg_pred = nn.Conv2d(channels, 4, 1)
        bias = -math.log((1.0 - prior) / prior)
        nn.init.constant_(self.cls_pred.bias, bias)
        nn.init.constant_(self.obj_pred.bias, bias)
        nn.init.zeros_(self.reg_pred.bias)

    def forward(self, fused: torch.Tensor) -> HeadOutput:
        fused, squeeze = ensure_batch(fused, 3)
        cls_feat = self.cls_stem(fused)
        reg_feat = self.reg_stem(fused)
        reg = self.reg_pred(reg_feat)
        obj = self.obj_pred(cls_feat)
        cls = self.cls_pred(cls_feat)
        if squeeze:
            reg, obj, cls = reg.squeeze(0), obj.squeeze(0), cls.squeeze(0)
        return HeadOutput(reg=reg, obj=obj, cls=cls, stride=self.stride)


def grid_centers(h: int, w: int, stride: int, dtype=None, device=None):
    """Pixel coordinates of cell centers: two (h, w) maps (x, y)."""
    ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) * stride
    xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) * stride
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return xx, yy


def decode_output(out: HeadOutput):
    """Raw maps -> (boxes (..., h*w, 4) xyxy, objectness (..., h*w),
    class scores (..., h*w, n_cls)), all in pixels / [0,1]."""
    reg, squeeze = ensure_batch(out.reg, 3)
    obj, _ = ensure_batch(out.obj, 3)
    cls, _ = ensure_batch(out.cls, 3)
    h, w = reg.shape[-2:]
    xx, yy = grid_centers(h, w, out.stride, dtype=reg.dtype, device=reg.device)
    dx, dy, dw, dh = reg.unbind(dim=1)
    cx = xx + dx * out.stride
    cy = yy + dy * out.stride
    bw = torch.exp(dw) * out.stride
    bh = torch.exp(dh) * out.stride
    boxes = torch.stack(
        [cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], dim=-1
    ).reshape(reg.shape[0], h * w, 4)
    objectness = torch.sigmoid(obj).reshape(reg.shape[0], h * w)
    class_scores = torch.sigmoid(cls).flatten(2).transpose(1, 2)
    if squeeze:
        return boxes.squeeze(0), objectness.squeeze(0), class_scores.squeeze(0)
    return boxes, objectness, class_scores


def encode_boxes(boxes: torch.Tensor, cells: torch.Tensor,
                 stride: int) -> torch.Tensor:
    """Inverse of the decode convention.

    boxes: (n, 4) xyxy pixels; cells: (n, 2) integer (row, col) grid
    indices; returns (n, 4) raw regression targets (dx, dy, dw, dh).
    """
    cx = (boxes[:, 0] + boxes[:, 2]) / 2
    cy = (boxes[:, 1] + boxes[:, 3]) / 2
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    col = cells[:, 1].to(boxes.dtype)
    row = cells[:, 0].to(boxes.dtype)
    dx = cx / stride - (col + 0.5)
    dy = cy / stride - (row + 0.5)
    dw = torch.log(bw / stride)
    dh = torch.log(bh / stride)
    return torch.stack([dx, dy, dw, dh], dim=1)


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two xyxy boxes."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = max(a[2] - a[0], 0.0) * max(a[3] - a[1], 0.0)
    area_b = max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def detections_from_output(out: HeadOutput,
                           score_threshold: float = 0.001) -> list[Detection]:
    """Flatten one sample's raw maps to Detection objects above the
    score threshold (score = objectness * best class score)."""
    if out.batched:
        raise ValueError("pass a single sample (use .sample(i) on batches)")
    boxes, objectness, class_scores = decode_output(out)
    best_cls, cls_id = class_scores.max(dim=-1)
    keep = (objectness * best_cls) >= score_threshold
    dets = []
    for idx in keep.nonzero(as_tuple=True)[0].tolist():
        dets.append(
            Detection(
                box=tuple(float(v) for v in boxes[idx]),
                objectness=float(objectness[idx]),
                class_score=float(best_cls[idx]),
                class_id=int(cls_id[idx]),
            )
        )
    return dets


def nms(detections: Sequence[Detection], iou_threshold: float = 0.65,
        score_threshold: float = 0.001) -> list[Detection]:
    """Greedy suppression, deterministic: candidates are visited by
    descending score, ties broken by larger area then lower x_min."""
    pool = [d for d in detections if d.score >= score_threshold]
    pool.sort(key=lambda d: (-d.score, -d.area, d.box[0]))
    kept: list[Detection] = []
    for cand in pool:
        if all(box_iou(cand.box, k.box) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


def assign_targets(boxes: Sequence[GroundTruthBox], grid_h: int, grid_w: int,
                   stride: int, radius: float = 1.5, dtype=torch.float32,
                   device=None) -> AssignedTargets:
    """Center-sampling assignment: a box claims the cells whose centers
    lie within `radius * stride` of the box center (Chebyshev distance);
    contested cells go to the box with the nearest center."""
    obj = torch.zeros(grid_h, grid_w, dtype=dtype, device=device)
    reg = torch.zeros(4, grid_h, grid_w, dtype=dtype, device=device)
    positive = torch.zeros(grid_h, grid_w, dtype=torch.bool, device=device)
    gt_index = torch.full((grid_h, grid_w), -1, dtype=torch.long, device=device)
    boxes = tuple(boxes)
    if boxes:
        xx, yy = grid_centers(grid_h, grid_w, stride, dtype=dtype, device=device)
        centers = torch.tensor(
            [[(b.x_min + b.x_max) / 2, (b.y_min + b.y_max) / 2] for b in boxes],
            dtype=dtype, device=device,
        )
        dx = (centers[:, 0].view(-1, 1, 1) - xx).abs()
        dy = (centers[:, 1].view(-1, 1, 1) - yy).abs()
        cheby = torch.maximum(dx, dy)                     # (n, h, w)
        claimed = cheby <= radius * stride
        cost = torch.where(claimed, cheby, torch.full_like(cheby, math.inf))
        best = cost.argmin(dim=0)                         # (h, w)
        positive = claimed.any(dim=0)
        gt_index = torch.where(positive, best, gt_index)
        obj = positive.to(dtype)
        if positive.any():
            rows, cols = positive.nonzero(as_tuple=True)
            cells = torch.stack([rows, cols], dim=1)
            chosen = torch.tensor(
                [boxes[i].as_xyxy() for i in best[rows, cols].tolist()],
                dtype=dtype, device=device,
            )
            reg[:, rows, cols] = encode_boxes(chosen, cells, stride).T
    return AssignedTargets(obj=obj, reg=reg, positive=positive,
                           gt_index=gt_index, boxes=boxes)
