"""Hungarian matching of predictions to ground truth and the matched set loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import LossConfig
from .tensor import make_op, sigmoid_forward


class DegenerateBoxError(ValueError):
    pass


@dataclass
class GroundTruthSet:
    labels: np.ndarray  # [G] int
    boxes: np.ndarray  # [G, 4] normalized (cx, cy, w, h)
    iscrowd: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if self.iscrowd is None:
            self.iscrowd = np.zeros(len(self.labels), dtype=bool)
        self.iscrowd = np.asarray(self.iscrowd, dtype=bool).reshape(-1)

    def __len__(self) -> int:
        return len(self.labels)

    def without_crowd(self) -> "GroundTruthSet":
        keep = ~self.iscrowd
        return GroundTruthSet(self.labels[keep], self.boxes[keep])


# ---------------------------------------------------------------------------------
# boxes
# ---------------------------------------------------------------------------------

def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b)
    x0, y0, x1, y1 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def _check_boxes(b: np.ndarray) -> None:
    if b.size and (np.any(b[..., 2] <= b[..., 0]) or np.any(b[..., 3] <= b[..., 1])):
        raise DegenerateBoxError("boxes need positive width and height")


def box_iou_matrix(a: np.ndarray, b: np.ndarray):
    """Pairwise IoU and union of corner-form boxes [N, 4] x [M, 4]."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union, union


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise generalized IoU of corner-form boxes [N, 4] x [M, 4]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    _check_boxes(a)
    _check_boxes(b)
    iou, union = box_iou_matrix(a, b)
    lt = np.minimum(a[:, None, :2], b[None, :, :2])
    rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh = rb - lt
    enclosing = wh[..., 0] * wh[..., 1]
    return iou - (enclosing - union) / enclosing


def giou(box_a, box_b) -> float:
    """Generalized IoU of two corner-form boxes (x0, y0, x1, y1), in [-1, 1]."""
    return float(giou_matrix(box_a, box_b)[0, 0])


def giou_pairs_with_grad(pred: np.ndarray, target: np.ndarray):
    """GIoU of matched cxcywh pairs [N, 4] and its gradient with respect to ``pred``."""
    p = cxcywh_to_xyxy(pred)
    t = cxcywh_to_xyxy(target)
    px0, py0, px1, py1 = p.T
    tx0, ty0, tx1, ty1 = t.T
    area_p = (px1 - px0) * (py1 - py0)
    area_t = (tx1 - tx0) * (ty1 - ty0)
    iw_raw = np.minimum(px1, tx1) - np.maximum(px0, tx0)
    ih_raw = np.minimum(py1, ty1) - np.maximum(py0, ty0)
    overlap = (iw_raw > 0) & (ih_raw > 0)
    iw, ih = np.clip(iw_raw, 0, None), np.clip(ih_raw, 0, None)
    inter = iw * ih
    union = area_p + area_t - inter
    ew = np.maximum(px1, tx1) - np.minimum(px0, tx0)
    eh = np.maximum(py1, ty1) - np.minimum(py0, ty0)
    enc = ew * eh
    value = inter / union - 1.0 + union / enc

    # partials of each intermediate with respect to the prediction corners
    d_iw = {"x0": -1.0 * (px0 > tx0), "x1": 1.0 * (px1 < tx1)}
    d_ih = {"y0": -1.0 * (py0 > ty0), "y1": 1.0 * (py1 < ty1)}
    d_ew = {"x0": -1.0 * (px0 <= tx0), "x1": 1.0 * (px1 >= tx1)}
    d_eh = {"y0": -1.0 * (py0 <= ty0), "y1": 1.0 * (py1 >= ty1)}
    ph, pw = py1 - py0, px1 - px0
    d_area = {"x0": -ph, "x1": ph, "y0": -pw, "y1": pw}
    grads = {}
    for k in ("x0", "x1", "y0", "y1"):
        if k[0] == "x":
            d_inter = np.where(overlap, d_iw[k] * ih, 0.0)
            d_enc = d_ew[k] * eh
        else:
            d_inter = np.where(overlap, d_ih[k] * iw, 0.0)
            d_enc = d_eh[k] * ew
        d_union = d_area[k] - d_inter
        d_iou = (d_inter * union - inter * d_union) / union ** 2
        d_ratio = (d_union * enc - union * d_enc) / enc ** 2
        grads[k] = d_iou + d_ratio
    g = np.stack([grads["x0"] + grads["x1"], grads["y0"] + grads["y1"],
                  (grads["x1"] - grads["x0"]) / 2, (grads["y1"] - grads["y0"]) / 2], axis=-1)
    return value, g


# ---------------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------------

def focal_class_cost(prob: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    neg = (1 - alpha) * prob ** gamma * -np.log(1 - prob + 1e-8)
    pos = alpha * (1 - prob) ** gamma * -np.log(prob + 1e-8)
    return pos - neg


def build_cost_matrix(logits: np.ndarray, boxes: np.ndarray, gts: GroundTruthSet,
                      cfg: LossConfig) -> np.ndarray:
    """Matching cost [G, Q] from class probabilities, box L1 distance and GIoU."""
    logits = np.asarray(logits, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    if logits.shape[0] == 0:
        raise ValueError("prediction set is empty")
    q = logits.shape[0]
    if len(gts) == 0:
        return np.zeros((0, q))
    prob = sigmoid_forward(logits)[:, gts.labels].T  # [G, Q]
    if cfg.match_cost == "focal":
        cls = focal_class_cost(prob, cfg.focal_alpha, cfg.focal_gamma)
    else:
        cls = -prob
    l1 = np.abs(gts.boxes[:, None, :] - boxes[None, :, :]).sum(-1)
    g = giou_matrix(cxcywh_to_xyxy(gts.boxes), cxcywh_to_xyxy(boxes))
    return cfg.cls_weight * cls + cfg.l1_weight * l1 + cfg.giou_weight * (1 - g)


def _hungarian_core(cost: np.ndarray):
    """Shortest-augmenting-path assignment for rows <= cols; returns (cols, u, v)."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) holding column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free[1:] & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free[1:], minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.zeros(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols, u[1:], v[1:]


def _optimum(cost: np.ndarray) -> tuple[float, np.ndarray]:
    if cost.shape[0] == 0:
        return 0.0, np.zeros(0, dtype=np.int64)
    cols, _, _ = _hungarian_core(cost)
    return float(cost[np.arange(len(cols)), cols].sum()), cols


def hungarian(cost) -> np.ndarray:
    """Minimum-cost assignment ``cols`` (row i -> column cols[i]) for rows <= columns.

    Among several optimal assignments the lexicographically smallest ``cols``
    is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    n, m = cost.shape
    if n > m:
        raise ValueError(f"more ground-truth rows ({n}) than prediction columns ({m})")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    cols, u, v = _hungarian_core(cost)
    scale = max(1.0, float(np.abs(cost).max()))
    tol = 1e-11 * scale * n
    reduced = cost - u[:, None] - v[None, :]
    # every optimal assignment uses zero reduced-cost entries only; unique unless extras exist
    if np.count_nonzero(np.abs(reduced) <= tol) == n:
        return cols
    return _lexicographic(cost, cols, tol)


def _lexicographic(cost: np.ndarray, cols: np.ndarray, tol: float) -> np.ndarray:
    n, m = cost.shape
    cols = cols.copy()
    taken: list[int] = []
    for i in range(n):
        avail = np.array([j for j in range(m) if j not in taken])
        rest_target, _ = _optimum(cost[i:][:, avail])
        for j in sorted(int(c) for c in avail if c < cols[i]):
            sub = avail[avail != j]
            value, sub_cols = _optimum(cost[i + 1:][:, sub])
            if abs(cost[i, j] + value - rest_target) <= tol:
                cols[i] = j
                cols[i + 1:] = sub[sub_cols]
                break
        taken.append(int(cols[i]))
    return cols


@dataclass
class MatchAssignment:
    gt_indices: np.ndarray
    query_indices: np.ndarray

    def as_dict(self) -> dict[int, int]:
        return {int(g): int(q) for g, q in zip(self.gt_indices, self.query_indices)}


def match(logits: np.ndarray, boxes: np.ndarray, gts: GroundTruthSet, cfg: LossConfig) -> MatchAssignment:
    if len(gts) == 0:
        return MatchAssignment(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    cols = hungarian(build_cost_matrix(logits, boxes, gts, cfg))
    return MatchAssignment(np.arange(len(gts)), cols)


# ---------------------------------------------------------------------------------
# set loss
# ---------------------------------------------------------------------------------

def sigmoid_focal_loss_with_grad(logits: np.ndarray, targets: np.ndarray, alpha: float, gamma: float):
    """Elementwise sigmoid focal loss and its derivative with respect to the logits."""
    p = sigmoid_forward(logits)
    ce = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    p_t = p * targets + (1 - p) * (1 - targets)
    one_minus = 1 - p_t
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets) if alpha >= 0 else 1.0
    mod = one_minus ** gamma
    d_mod = -gamma * one_minus ** (gamma - 1) * (2 * targets - 1) * p * (1 - p) if gamma else 0.0
    loss = alpha_t * mod * ce
    grad = alpha_t * (mod * (p - targets) + d_mod * ce)
    return loss, grad


@dataclass
class LossReport:
    total: float
    cls: float
    l1: float
    giou: float
    per_layer: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"loss_total": self.total, "loss_cls": self.cls, "loss_l1": self.l1,
                "loss_giou": self.giou}


def _layer_terms(logits: np.ndarray, boxes: np.ndarray, gts: list[GroundTruthSet],
                 matches: list[MatchAssignment], cfg: LossConfig, num_boxes: float):
    b, q, c = logits.shape
    onehot = np.zeros((b, q, c))
    for i, (gt, mt) in enumerate(zip(gts, matches)):
        onehot[i, mt.query_indices, gt.labels[mt.gt_indices]] = 1.0
    focal, g_logits = sigmoid_focal_loss_with_grad(logits.astype(np.float64), onehot,
                                                   cfg.focal_alpha, cfg.focal_gamma)
    loss_cls = focal.sum() / num_boxes
    g_logits = g_logits / num_boxes
    g_boxes = np.zeros((b, q, 4))
    loss_l1 = 0.0
    loss_giou = 0.0
    for i, (gt, mt) in enumerate(zip(gts, matches)):
        if len(mt.query_indices) == 0:
            continue
        pred = boxes[i, mt.query_indices].astype(np.float64)
        target = gt.boxes[mt.gt_indices]
        diff = pred - target
        loss_l1 += np.abs(diff).sum()
        value, d_giou = giou_pairs_with_grad(pred, target)
        loss_giou += (1 - value).sum()
        g = cfg.l1_weight * np.sign(diff) - cfg.giou_weight * d_giou
        np.add.at(g_boxes[i], mt.query_indices, g / num_boxes)
    loss_l1 /= num_boxes
    loss_giou /= num_boxes
    total = cfg.cls_weight * loss_cls + cfg.l1_weight * loss_l1 + cfg.giou_weight * loss_giou
    terms = {"total": float(total), "cls": float(loss_cls), "l1": float(loss_l1),
             "giou": float(loss_giou)}
    return terms, cfg.cls_weight * g_logits, g_boxes


def set_loss(layer_outputs, gts: list[GroundTruthSet], cfg: LossConfig,
             matches: list[list[MatchAssignment]] | None = None):
    """Matched set loss summed over decoder layers.

    ``layer_outputs`` is a sequence of objects with ``logits`` [B, Q, C] and
    ``boxes`` [B, Q, 4] tensors.  Matching runs per layer on the forward values
    and is a constant for the backward; pass ``matches`` to pin it.
    Returns ``(loss_tensor, LossReport, matches)``.
    """
    layers = list(layer_outputs) if cfg.aux_loss else [layer_outputs[-1]]
    gts = [gt.without_crowd() for gt in gts]
    num_boxes = float(max(sum(len(g) for g in gts), 1))
    if matches is None:
        matches = [[match(out.logits.data[i], out.boxes.data[i], gt, cfg) for i, gt in enumerate(gts)]
                   for out in layers]
    parents, grads, per_layer = [], [], []
    for out, layer_matches in zip(layers, matches):
        terms, g_logits, g_boxes = _layer_terms(out.logits.data, out.boxes.data, gts,
                                                layer_matches, cfg, num_boxes)
        per_layer.append(terms)
        parents += [out.logits, out.boxes]
        grads += [g_logits.astype(out.logits.dtype), g_boxes.astype(out.boxes.dtype)]
    report = LossReport(
        total=float(sum(t["total"] for t in per_layer)),
        cls=float(sum(t["cls"] for t in per_layer)),
        l1=float(sum(t["l1"] for t in per_layer)),
        giou=float(sum(t["giou"] for t in per_layer)),
        per_layer=per_layer,
    )
    dtype = layers[0].logits.dtype
    loss = make_op(np.asarray(report.total, dtype=dtype), parents,
                   lambda g: tuple(g * gr for gr in grads))
    return loss, report, matches
