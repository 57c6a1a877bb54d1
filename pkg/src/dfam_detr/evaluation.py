"""COCO-style average precision and detection decoding."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .matcher import GroundTruthSet, cxcywh_to_xyxy
from .tensor import sigmoid_forward

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {
    "all": (0.0, 1e10),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, 1e10),
}


@dataclass
class Detections:
    boxes: np.ndarray  # [N, 4] normalized (cx, cy, w, h)
    scores: np.ndarray  # [N]
    labels: np.ndarray  # [N]


@dataclass
class APReport:
    """AP values in [0, 1]; ``None`` where no ground truth falls in the partition."""

    ap: float | None
    ap50: float | None
    ap75: float | None
    aps: float | None
    apm: float | None
    apl: float | None
    per_class_ap: list = field(default_factory=list)
    per_class_ap50: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        def fmt(v):
            return " n/a " if v is None else f"{v:.3f}"

        return (f"AP {fmt(self.ap)} | AP50 {fmt(self.ap50)} | AP75 {fmt(self.ap75)} | "
                f"APs {fmt(self.aps)} | APm {fmt(self.apm)} | APl {fmt(self.apl)}")


def decode_detections(logits: np.ndarray, boxes: np.ndarray, max_detections: int = 100,
                      score_floor: float = 0.0) -> Detections:
    """Top-scoring (query, class) pairs by per-class sigmoid probability for one image."""
    q, c = logits.shape
    prob = sigmoid_forward(np.asarray(logits, dtype=np.float64)).ravel()
    order = np.argsort(-prob, kind="stable")[:max_detections]
    order = order[prob[order] >= score_floor]
    return Detections(np.asarray(boxes, dtype=np.float64)[order // c], prob[order], order % c)


def _iou_with_crowd(dets: np.ndarray, gts: np.ndarray, crowd: np.ndarray) -> np.ndarray:
    """[D, G] IoU of pixel xyxy boxes; crowd ground truth uses the detection area as union."""
    if len(dets) == 0 or len(gts) == 0:
        return np.zeros((len(dets), len(gts)))
    lt = np.maximum(dets[:, None, :2], gts[None, :, :2])
    rb = np.minimum(dets[:, None, 2:], gts[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    ad = (dets[:, 2] - dets[:, 0]) * (dets[:, 3] - dets[:, 1])
    ag = (gts[:, 2] - gts[:, 0]) * (gts[:, 3] - gts[:, 1])
    union = np.where(crowd[None, :], ad[:, None], ad[:, None] + ag[None, :] - inter)
    return inter / union


def _match_image(det_boxes, det_areas, gt_boxes, gt_areas, gt_crowd, area, thresholds):
    """Greedy score-ordered matching for one image/class/area range.

    Detections must already be sorted by descending score.  Returns per
    threshold (tp, ignored) flags over the detections and the non-ignored
    ground-truth count.
    """
    lo, hi = area
    gt_ignore = gt_crowd | (gt_areas < lo) | (gt_areas > hi)
    order = np.argsort(gt_ignore, kind="stable")
    gt_boxes, gt_crowd, gt_ignore = gt_boxes[order], gt_crowd[order], gt_ignore[order]
    ious = _iou_with_crowd(det_boxes, gt_boxes, gt_crowd)
    n_det, n_gt = len(det_boxes), len(gt_boxes)
    det_out_of_range = (det_areas < lo) | (det_areas > hi)
    tp = np.zeros((len(thresholds), n_det), dtype=bool)
    ignored = np.zeros((len(thresholds), n_det), dtype=bool)
    for t, thr in enumerate(thresholds):
        gt_taken = np.zeros(n_gt, dtype=bool)
        for d in range(n_det):
            best = min(thr, 1 - 1e-10)
            m = -1
            for g in range(n_gt):
                if gt_taken[g] and not gt_crowd[g]:
                    continue
                # once matched to a real object, stop at the ignored tail
                if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                    break
                if ious[d, g] < best:
                    continue
                best = ious[d, g]
                m = g
            if m == -1:
                ignored[t, d] = det_out_of_range[d]
                continue
            gt_taken[m] = True
            ignored[t, d] = gt_ignore[m]
            tp[t, d] = True
    return tp, ignored, int((~gt_ignore).sum())


def interpolated_ap(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP of a detection list (ignored detections already removed)."""
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[order]
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gt
    precision = tps / np.maximum(tps + fps, 1)
    precision = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = [float(precision[i]) if i < len(precision) else 0.0 for i in idx]
    return math.fsum(q) / len(q)


def _mean(values) -> float | None:
    values = [v for v in values if v is not None]
    return math.fsum(values) / len(values) if values else None


def evaluate_ap(predictions: list[Detections], gts: list[GroundTruthSet],
                image_sizes: list[tuple[int, int]], num_classes: int,
                iou_thresholds=IOU_THRESHOLDS, area_ranges=AREA_RANGES,
                max_detections: int = 100) -> APReport:
    """COCO-style AP over a dataset; ``image_sizes`` are (height, width) in pixels."""
    thresholds = np.asarray(iou_thresholds, dtype=np.float64)
    if not (len(predictions) == len(gts) == len(image_sizes)):
        raise ValueError("predictions, ground truth and image sizes must align per image")
    # table[area][class][threshold] -> AP or None
    table = {a: [[None] * len(thresholds) for _ in range(num_classes)] for a in area_ranges}
    for a_name, area in area_ranges.items():
        for cls in range(num_classes):
            scores, flags, n_gt = [], [], 0
            for det, gt, (h, w) in zip(predictions, gts, image_sizes):
                scale = np.array([w, h, w, h], dtype=np.float64)
                dm = np.asarray(det.labels) == cls
                d_scores = np.asarray(det.scores, dtype=np.float64)[dm]
                order = np.argsort(-d_scores, kind="mergesort")[:max_detections]
                d_scores = d_scores[order]
                d_boxes = cxcywh_to_xyxy(np.asarray(det.boxes, dtype=np.float64)[dm][order]) * scale
                d_areas = (d_boxes[:, 2] - d_boxes[:, 0]) * (d_boxes[:, 3] - d_boxes[:, 1])
                gm = gt.labels == cls
                g_boxes = cxcywh_to_xyxy(gt.boxes[gm]) * scale
                g_areas = (g_boxes[:, 2] - g_boxes[:, 0]) * (g_boxes[:, 3] - g_boxes[:, 1])
                tp, ignored, count = _match_image(d_boxes.reshape(-1, 4), d_areas,
                                                  g_boxes.reshape(-1, 4), g_areas,
                                                  gt.iscrowd[gm], area, thresholds)
                n_gt += count
                scores.append(d_scores)
                flags.append((tp, ignored))
            if n_gt == 0:
                continue
            all_scores = np.concatenate(scores) if scores else np.zeros(0)
            for t in range(len(thresholds)):
                tp = np.concatenate([f[0][t] for f in flags]) if flags else np.zeros(0, bool)
                ig = np.concatenate([f[1][t] for f in flags]) if flags else np.zeros(0, bool)
                table[a_name][cls][t] = interpolated_ap(all_scores[~ig], tp[~ig], n_gt)

    def summarize(area: str, t_index=None):
        vals = []
        for cls_row in table.get(area, []):
            vals += cls_row if t_index is None else [cls_row[t_index]]
        return _mean(vals)

    def where(value):
        hits = np.flatnonzero(np.isclose(thresholds, value))
        return int(hits[0]) if hits.size else None

    i50, i75 = where(0.5), where(0.75)
    return APReport(
        ap=summarize("all"),
        ap50=summarize("all", i50) if i50 is not None else None,
        ap75=summarize("all", i75) if i75 is not None else None,
        aps=summarize("small"),
        apm=summarize("medium"),
        apl=summarize("large"),
        per_class_ap=[_mean(row) for row in table["all"]],
        per_class_ap50=[row[i50] if i50 is not None else None for row in table["all"]],
    )
