"""Detection evaluation: greedy matching, average precision at IoU 0.5,
PR curves, an F1-maximizing operating point, and size-bucket breakdowns.

Matching is greedy in descending score order, each detection claiming
the highest-IoU still-unmatched ground-truth box at or above the IoU
threshold.  Because a detection's match depends only on higher-scored
detections, the match flags are stable under score thresholding, so one
global match supports the whole PR curve.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import jsonschema

from .data import GroundTruthBox, SIZE_BUCKETS, bucket_for_area
from .head import Detection, box_iou

OPERATING_RULE = "score threshold maximizing F1 on this split"


@dataclass
class MatchResult:
    """Matching outcome for one image.

    `det_to_gt` is aligned with the detections in descending-score order
    (ties: larger area, then lower x_min) and holds the matched gt index
    or -1.
    """

    order: list[int]
    det_to_gt: list[int]
    num_gt: int

    @property
    def true_positives(self) -> int:
        return sum(1 for g in self.det_to_gt if g >= 0)


def _det_sort_key(det: Detection):
    return (-det.score, -det.area, det.box[0])


def match(detections: Sequence[Detection], gts: Sequence[GroundTruthBox],
          iou_threshold: float = 0.5) -> MatchResult:
    order = sorted(range(len(detections)),
                   key=lambda i: _det_sort_key(detections[i]))
    claimed: set[int] = set()
    det_to_gt = []
    for i in order:
        det = detections[i]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if j in claimed:
                continue
            iou = box_iou(det.box, gt.as_xyxy())
            if iou >= iou_threshold and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            claimed.add(best_j)
        det_to_gt.append(best_j)
    return MatchResult(order=order, det_to_gt=det_to_gt, num_gt=len(gts))


@dataclass(frozen=True)
class ScoredDetection:
    """One detection's contribution to dataset-level metrics."""

    score: float
    matched: bool
    det_area: float
    gt_area: float | None


@dataclass(frozen=True)
class ScoredGroundTruth:
    """One gt box: its area and the score of the detection that
    claimed it (None when unmatched at every threshold)."""

    area: float
    matched_score: float | None


def score_dataset(per_image: Sequence[tuple[Sequence[Detection],
                                            Sequence[GroundTruthBox]]],
                  iou_threshold: float = 0.5
                  ) -> tuple[list[ScoredDetection], list[ScoredGroundTruth]]:
    """Match every image and pool results for dataset-level metrics.

    Returns detections sorted by descending score and one entry per
    ground-truth box.
    """
    dets_out: list[ScoredDetection] = []
    gts_out: list[ScoredGroundTruth] = []
    for detections, gts in per_image:
        result = match(detections, gts, iou_threshold)
        matched_score: dict[int, float] = {}
        for rank, det_idx in enumerate(result.order):
            det = detections[det_idx]
            gt_idx = result.det_to_gt[rank]
            if gt_idx >= 0:
                matched_score[gt_idx] = det.score
            dets_out.append(ScoredDetection(
                score=det.score,
                matched=gt_idx >= 0,
                det_area=det.area,
                gt_area=gts[gt_idx].area if gt_idx >= 0 else None,
            ))
        for j, gt in enumerate(gts):
            gts_out.append(ScoredGroundTruth(
                area=gt.area, matched_score=matched_score.get(j),
            ))
    dets_out.sort(key=lambda d: -d.score)
    return dets_out, gts_out


def average_precision(scored: Sequence[ScoredDetection],
                      num_gt: int) -> float:
    """Area under the all-points-interpolated precision envelope."""
    if num_gt == 0 or not scored:
        return 0.0
    ranked = sorted(scored, key=lambda d: -d.score)
    precisions, recalls = [], []
    tp = 0
    for k, det in enumerate(ranked, start=1):
        tp += det.matched
        precisions.append(tp / k)
        recalls.append(tp / num_gt)
    for k in range(len(precisions) - 2, -1, -1):
        precisions[k] = max(precisions[k], precisions[k + 1])
    ap = 0.0
    prev_recall = 0.0
    for p, r in zip(precisions, recalls):
        ap += (r - prev_recall) * p
        prev_recall = r
    return ap


def precision_recall_at(scored: Sequence[ScoredDetection], num_gt: int,
                        threshold: float) -> tuple[float, float]:
    """(precision, recall) keeping detections with score >= threshold.

    With no kept detections, precision is defined as 1 so PR curves stay
    continuous at their high-threshold end.
    """
    kept = [d for d in scored if d.score >= threshold]
    tp = sum(d.matched for d in kept)
    precision = tp / len(kept) if kept else 1.0
    recall = tp / num_gt if num_gt else 0.0
    return precision, recall


def pr_curve(scored: Sequence[ScoredDetection], num_gt: int,
             thresholds: Sequence[float] | None = None
             ) -> list[tuple[float, float]]:
    """(recall, precision) points for descending thresholds."""
    if thresholds is None:
        thresholds = sorted({d.score for d in scored}, reverse=True)
    points = []
    prev = None
    for t in thresholds:
        if prev is not None and t > prev:
            raise ValueError("thresholds must be descending")
        prev = t
        precision, recall = precision_recall_at(scored, num_gt, t)
        points.append((recall, precision))
    return points


def operating_point(scored: Sequence[ScoredDetection],
                    num_gt: int) -> tuple[float, float, float, float]:
    """(threshold, precision, recall, f1) maximizing F1.

    Ties keep the highest threshold, so the operating point is the most
    selective among equally good ones.  With no detections the threshold
    is 1.0 (keep nothing) and precision follows the empty-prediction
    convention.
    """
    candidates = sorted({d.score for d in scored}, reverse=True)
    best = (1.0, 1.0, 0.0, 0.0)
    best_f1 = -1.0
    for t in candidates:
        precision, recall = precision_recall_at(scored, num_gt, t)
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall > 0 else 0.0)
        if f1 > best_f1:
            best_f1 = f1
            best = (t, precision, recall, f1)
    return best


def bucket_counts(scored_dets: Sequence[ScoredDetection],
                  scored_gts: Sequence[ScoredGroundTruth],
                  threshold: float) -> dict[str, dict[str, int]]:
    """TP/FP/FN per size bucket at one score threshold.

    True positives bucket by the matched gt's area, false positives by
    the detection's own area, false negatives by the gt's area.
    """
    counts = {b.name: {"tp": 0, "fp": 0, "fn": 0} for b in SIZE_BUCKETS}
    for det in scored_dets:
        if det.score < threshold:
            continue
        if det.matched:
            counts[bucket_for_area(det.gt_area).name]["tp"] += 1
        else:
            counts[bucket_for_area(det.det_area).name]["fp"] += 1
    for gt in scored_gts:
        if gt.matched_score is None or gt.matched_score < threshold:
            counts[bucket_for_area(gt.area).name]["fn"] += 1
    return counts


@dataclass
class EvalReport:
    """Dataset-level evaluation summary, serializable to JSON."""

    ap50: float
    precision: float
    recall: float
    f1: float
    operating_threshold: float
    operating_rule: str
    pr_points: list[tuple[float, float]]
    bucket_counts: dict[str, dict[str, int]]
    num_detections: int
    num_ground_truths: int
    no_ground_truth: bool
    match_iou: float = 0.5
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ap50": self.ap50,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "operating_threshold": self.operating_threshold,
            "operating_rule": self.operating_rule,
            "pr_points": [[r, p] for r, p in self.pr_points],
            "bucket_counts": self.bucket_counts,
            "num_detections": self.num_detections,
            "num_ground_truths": self.num_ground_truths,
            "no_ground_truth": self.no_ground_truth,
            "match_iou": self.match_iou,
            "extra": self.extra,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kwargs)


REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "ap50", "precision", "recall", "f1", "operating_threshold",
        "operating_rule", "pr_points", "bucket_counts", "num_detections",
        "num_ground_truths", "no_ground_truth", "match_iou",
    ],
    "properties": {
        "ap50": {"type": "number", "minimum": 0, "maximum": 1},
        "precision": {"type": "number", "minimum": 0, "maximum": 1},
        "recall": {"type": "number", "minimum": 0, "maximum": 1},
        "f1": {"type": "number", "minimum": 0, "maximum": 1},
        "operating_threshold": {"type": "number"},
        "operating_rule": {"type": "string"},
        "pr_points": {
            "type": "array",
            "items": {
                "type": "array",
                "items": {"type": "number", "minimum": 0, "maximum": 1},
                "minItems": 2,
                "maxItems": 2,
            },
        },
        "bucket_counts": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["tp", "fp", "fn"],
                "properties": {
                    "tp": {"type": "integer", "minimum": 0},
                    "fp": {"type": "integer", "minimum": 0},
                    "fn": {"type": "integer", "minimum": 0},
                },
            },
        },
        "num_detections": {"type": "integer", "minimum": 0},
        "num_ground_truths": {"type": "integer", "minimum": 0},
        "no_ground_truth": {"type": "boolean"},
        "match_iou": {"type": "number", "minimum": 0, "maximum": 1},
        "extra": {"type": "object"},
    },
}


def validate_report(report_dict: dict):
    """Raises jsonschema.ValidationError when the dict is malformed."""
    jsonschema.validate(report_dict, REPORT_SCHEMA)


def build_report(per_image: Sequence[tuple[Sequence[Detection],
                                           Sequence[GroundTruthBox]]],
                 iou_threshold: float = 0.5,
                 extra: dict | None = None) -> EvalReport:
    """Run the full evaluation pipeline over per-image pairs."""
    scored_dets, scored_gts = score_dataset(per_image, iou_threshold)
    num_gt = len(scored_gts)
    ap = average_precision(scored_dets, num_gt)
    threshold, precision, recall, f1 = operating_point(scored_dets, num_gt)
    buckets = bucket_counts(scored_dets, scored_gts, threshold)
    return EvalReport(
        ap50=ap,
        precision=precision,
        recall=recall,
        f1=f1,
        operating_threshold=threshold,
        operating_rule=OPERATING_RULE,
        pr_points=pr_curve(scored_dets, num_gt),
        bucket_counts=buckets,
        num_detections=len(scored_dets),
        num_ground_truths=num_gt,
        no_ground_truth=num_gt == 0,
        match_iou=iou_threshold,
        extra=extra or {},
    )
