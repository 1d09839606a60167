"""Composite detection objective.

Three parts with fixed default weights:

- objectness: sigmoid focal loss over every grid cell,
- classification: sigmoid focal loss over positive cells,
- regression (positive cells only): an equal blend of IoU loss and a
  Gaussian-proxy Wasserstein loss that stays informative for boxes with
  little or no overlap.

The Wasserstein term models a box as an axis-aligned Gaussian centered
on the box with standard deviations (w/2, h/2); the squared 2-Wasserstein
distance between two such Gaussians has the closed form

    W2^2 = (cx_p-cx_g)^2 + (cy_p-cy_g)^2
         + ((w_p-w_g)/2)^2 + ((h_p-h_g)/2)^2

and the loss is 1 - exp(-sqrt(W2^2)/C) for a dataset scale constant C.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F

from .data import GroundTruthBox
from .head import AssignedTargets, HeadOutput, decode_output


@dataclass(frozen=True)
class LossWeights:
    """Term weights and shape parameters of the objective."""

    reg_weight: float = 5.0
    cls_weight: float = 1.0
    obj_weight: float = 1.0
    iou_weight: float = 0.5
    nwd_weight: float = 0.5
    nwd_constant: float = 12.8
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class LossBreakdown:
    """All components as 0-dim tensors; `total` carries the graph."""

    total: torch.Tensor
    reg: torch.Tensor
    iou: torch.Tensor
    nwd: torch.Tensor
    cls: torch.Tensor
    obj: torch.Tensor
    num_positive: int

    def scalars(self) -> dict[str, float]:
        return {
            "total": float(self.total.detach()),
            "reg": float(self.reg.detach()),
            "iou": float(self.iou.detach()),
            "nwd": float(self.nwd.detach()),
            "cls": float(self.cls.detach()),
            "obj": float(self.obj.detach()),
            "num_positive": float(self.num_positive),
        }


def iou_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """1 - IoU for xyxy boxes, elementwise over leading dims."""
    ix = (torch.minimum(pred[..., 2], gt[..., 2])
          - torch.maximum(pred[..., 0], gt[..., 0])).clamp(min=0)
    iy = (torch.minimum(pred[..., 3], gt[..., 3])
          - torch.maximum(pred[..., 1], gt[..., 1])).clamp(min=0)
    inter = ix * iy
    area_p = ((pred[..., 2] - pred[..., 0]).clamp(min=0)
              * (pred[..., 3] - pred[..., 1]).clamp(min=0))
    area_g = ((gt[..., 2] - gt[..., 0]).clamp(min=0)
              * (gt[..., 3] - gt[..., 1]).clamp(min=0))
    union = area_p + area_g - inter
    iou = inter / union.clamp(min=torch.finfo(pred.dtype).tiny)
    return 1.0 - iou


def nwd_loss(pred: torch.Tensor, gt: torch.Tensor,
             constant: float = 12.8) -> torch.Tensor:
    """Normalized-Wasserstein regression loss for xyxy boxes."""
    if constant <= 0:
        raise ValueError(f"scale constant must be positive, got {constant}")
    cx_p = (pred[..., 0] + pred[..., 2]) / 2
    cy_p = (pred[..., 1] + pred[..., 3]) / 2
    cx_g = (gt[..., 0] + gt[..., 2]) / 2
    cy_g = (gt[..., 1] + gt[..., 3]) / 2
    w_p = pred[..., 2] - pred[..., 0]
    h_p = pred[..., 3] - pred[..., 1]
    w_g = gt[..., 2] - gt[..., 0]
    h_g = gt[..., 3] - gt[..., 1]
    w2_sq = ((cx_p - cx_g) ** 2 + (cy_p - cy_g) ** 2
             + ((w_p - w_g) / 2) ** 2 + ((h_p - h_g) / 2) ** 2)
    eps = torch.finfo(pred.dtype).tiny
    distance = torch.sqrt(w2_sq.clamp(min=eps))
    return 1.0 - torch.exp(-distance / constant)


def focal_loss(logits: torch.Tensor, targets: torch.Tensor,
               alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Mean sigmoid focal loss; targets are 0/1."""
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return (alpha_t * (1 - p_t) ** gamma * ce).mean()


def estimate_nwd_constant(boxes: Iterable[GroundTruthBox],
                          default: float = 12.8) -> float:
    """Dataset scale constant: mean sqrt(box area), or `default` when no
    boxes are available."""
    roots = [box.area ** 0.5 for box in boxes]
    if not roots:
        return default
    return sum(roots) / len(roots)


def total_loss(output: HeadOutput,
               targets: AssignedTargets | Sequence[AssignedTargets],
               weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Combine the components over one sample or a batch.

    Objectness covers every cell; classification and regression cover
    positive cells only and are defined as zero when nothing is assigned.
    """
    if output.batched:
        samples = [output.sample(i) for i in range(output.reg.shape[0])]
        target_list = list(targets)
    else:
        samples = [output]
        target_list = [targets] if isinstance(targets, AssignedTargets) \
            else list(targets)
    if len(samples) != len(target_list):
        raise ValueError(
            f"{len(samples)} samples but {len(target_list)} target sets"
        )
    dtype = output.reg.dtype
    device = output.reg.device

    obj_logits, obj_targets = [], []
    cls_logits, cls_targets = [], []
    pred_boxes, gt_boxes = [], []
    for out, tgt in zip(samples, target_list):
        obj_logits.append(out.obj.reshape(-1))
        obj_targets.append(tgt.obj.reshape(-1).to(dtype))
        if not bool(tgt.positive.any()):
            continue
        rows, cols = tgt.positive.nonzero(as_tuple=True)
        logits = out.cls[:, rows, cols]               # (n_cls, n_pos)
        onehot = torch.zeros_like(logits)
        class_ids = [tgt.boxes[k].class_id
                     for k in tgt.gt_index[rows, cols].tolist()]
        onehot[class_ids, range(len(class_ids))] = 1.0
        cls_logits.append(logits.reshape(-1))
        cls_targets.append(onehot.reshape(-1))
        boxes, _, _ = decode_output(out)              # (h*w, 4)
        flat = rows * tgt.positive.shape[1] + cols
        pred_boxes.append(boxes[flat])
        gt_boxes.append(torch.tensor(
            [tgt.boxes[k].as_xyxy()
             for k in tgt.gt_index[rows, cols].tolist()],
            dtype=dtype, device=device,
        ))

    zero = torch.zeros((), dtype=dtype, device=device)
    l_obj = focal_loss(torch.cat(obj_logits), torch.cat(obj_targets),
                       weights.focal_alpha, weights.focal_gamma)
    if pred_boxes:
        pred_cat = torch.cat(pred_boxes)
        gt_cat = torch.cat(gt_boxes)
        l_iou = iou_loss(pred_cat, gt_cat).mean()
        l_nwd = nwd_loss(pred_cat, gt_cat, weights.nwd_constant).mean()
        l_cls = focal_loss(torch.cat(cls_logits), torch.cat(cls_targets),
                           weights.focal_alpha, weights.focal_gamma)
        num_positive = sum(t.num_positive for t in target_list)
    else:
        l_iou = l_nwd = l_cls = zero
        num_positive = 0
    l_reg = weights.iou_weight * l_iou + weights.nwd_weight * l_nwd
    total = (weights.reg_weight * l_reg + weights.cls_weight * l_cls
             + weights.obj_weight * l_obj)
    return LossBreakdown(total=total, reg=l_reg, iou=l_iou, nwd=l_nwd,
                         cls=l_cls, obj=l_obj, num_positive=num_positive)
