"""Independent slow reference implementations used as test oracles.

Nothing here imports the package's numerical code: each routine is a direct
loop-level transcription of the definition it checks.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


# -- convolution --------------------------------------------------------------------

def conv2d_loops(x, w, b=None, stride=1, padding=0, dilation=1):
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                y = i * stride - padding + u * dilation
                                xx = j * stride - padding + v * dilation
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += x[n, c, y, xx] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def bilinear(plane, y, x):
    """Bilinear read with zero outside the plane, from the four-corner formula."""
    h, w = plane.shape
    y0, x0 = math.floor(y), math.floor(x)
    total = 0.0
    for yy, xx in ((y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)):
        weight = max(0.0, 1 - abs(y - yy)) * max(0.0, 1 - abs(x - xx))
        if 0 <= yy < h and 0 <= xx < w:
            total += weight * plane[yy, xx]
    return total


def deform_conv2d_loops(x, offsets, w, b=None, stride=1, padding=1, dilation=1):
    """Offsets [B, 2*k*k, Ho, Wo], tap-major with dy before dx."""
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    _, _, ho, wo = offsets.shape
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for i in range(ho):
            for j in range(wo):
                samples = np.zeros((cin, kh, kw))
                for u in range(kh):
                    for v in range(kw):
                        t = u * kw + v
                        py = i * stride - padding + u * dilation + offsets[n, 2 * t, i, j]
                        px = j * stride - padding + v * dilation + offsets[n, 2 * t + 1, i, j]
                        for c in range(cin):
                            samples[c, u, v] = bilinear(x[n, c], py, px)
                for o in range(cout):
                    out[n, o, i, j] = (samples * w[o]).sum() + (0.0 if b is None else b[o])
    return out


def ms_deform_attn_loops(value, locations, attention, shapes):
    """value [B,S,M,D], locations [B,Q,M,L,K,2] (x,y) normalized, attention [B,Q,M,L,K]."""
    bsz, _, m, d = value.shape
    _, q, _, n_lv, k, _ = locations.shape
    starts = np.cumsum([0] + [h * w for h, w in shapes])
    out = np.zeros((bsz, q, m, d))
    for n in range(bsz):
        for qi in range(q):
            for hd in range(m):
                for lv, (h, w) in enumerate(shapes):
                    level = value[n, starts[lv]:starts[lv + 1], hd].reshape(h, w, d)
                    for p in range(k):
                        x = locations[n, qi, hd, lv, p, 0] * w - 0.5
                        y = locations[n, qi, hd, lv, p, 1] * h - 0.5
                        read = np.array([bilinear(level[:, :, c], y, x) for c in range(d)])
                        out[n, qi, hd] += attention[n, qi, hd, lv, p] * read
    return out


# -- assignment ---------------------------------------------------------------------

def brute_force_assignment(cost):
    """Lexicographically first minimum-cost injective row -> column map."""
    cost = np.asarray(cost)
    rows, cols = cost.shape
    best, arg = None, None
    for perm in itertools.permutations(range(cols), rows):
        total = sum(cost[r, c] for r, c in enumerate(perm))
        if best is None or total < best:
            best, arg = total, perm
    return np.array(arg, dtype=int), best


# -- boxes --------------------------------------------------------------------------

def giou_scalar(a, b):
    """Corner-form boxes (x0, y0, x1, y1)."""
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    hull = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    return inter / union - (hull - union) / hull


# -- average precision --------------------------------------------------------------

def _iou(d, g, crowd):
    iw = max(0.0, min(d[2], g[2]) - max(d[0], g[0]))
    ih = max(0.0, min(d[3], g[3]) - max(d[1], g[1]))
    inter = iw * ih
    ad = (d[2] - d[0]) * (d[3] - d[1])
    ag = (g[2] - g[0]) * (g[3] - g[1])
    return inter / (ad if crowd else ad + ag - inter)


def _area(b):
    return (b[2] - b[0]) * (b[3] - b[1])


def _exact_mean(values):
    values = [v for v in values if v is not None]
    if not values:
        return None
    return float(sum(Fraction(v) for v in values)) / len(values)


def brute_force_ap(images, num_classes, thresholds, area_ranges):
    """COCO-style AP by direct enumeration.

    ``images`` is a list of dicts with pixel corner boxes:
    ``{"gt": [(box, label, crowd)], "det": [(box, label, score)]}``.
    Returns a dict with the same fields as the evaluator's report.
    """
    table = {}
    for a_name, (lo, hi) in area_ranges.items():
        for cls in range(num_classes):
            for t, thr in enumerate(thresholds):
                records, n_gt = [], 0
                for img in images:
                    gts = [(b, c) for b, lab, c in img["gt"] if lab == cls]
                    ignore = [c or not (lo <= _area(b) <= hi) for b, c in gts]
                    n_gt += sum(not i for i in ignore)
                    # real objects are searched before ignored ones
                    order = sorted(range(len(gts)), key=lambda g: (ignore[g], g))
                    dets = sorted([(s, b) for b, lab, s in img["det"] if lab == cls],
                                  key=lambda p: -p[0])
                    taken = set()
                    for score, box in dets:
                        chosen = None
                        for want_ignored in (False, True):
                            best = None
                            for g in order:
                                if ignore[g] != want_ignored:
                                    continue
                                if g in taken and not gts[g][1]:
                                    continue
                                iou = _iou(box, gts[g][0], gts[g][1])
                                if iou >= min(thr, 1 - 1e-10) and (best is None or iou >= best[0]):
                                    best = (iou, g)
                            if best is not None:
                                chosen = best[1]
                                break
                        if chosen is None:
                            if not (lo <= _area(box) <= hi):
                                continue
                            records.append((score, False))
                        else:
                            taken.add(chosen)
                            if not ignore[chosen]:
                                records.append((score, True))
                if n_gt == 0:
                    table[(a_name, cls, t)] = None
                    continue
                # stable sort by descending score over the flattened image order
                records = sorted(records, key=lambda r: -r[0])
                points = []
                tp = fp = 0
                for _, hit in records:
                    tp += hit
                    fp += not hit
                    points.append((tp / n_gt, tp / (tp + fp)))
                interp = []
                for r in np.linspace(0, 1, 101):
                    candidates = [p for rec, p in points if rec >= r]
                    interp.append(max(candidates) if candidates else 0.0)
                table[(a_name, cls, t)] = float(sum(Fraction(v) for v in interp)) / len(interp)

    def summarize(area, t=None):
        ts = range(len(thresholds)) if t is None else [t]
        return _exact_mean([table[(area, c, i)] for c in range(num_classes) for i in ts])

    i50 = int(np.flatnonzero(np.isclose(thresholds, 0.5))[0])
    i75 = int(np.flatnonzero(np.isclose(thresholds, 0.75))[0])
    return {
        "ap": summarize("all"), "ap50": summarize("all", i50), "ap75": summarize("all", i75),
        "aps": summarize("small"), "apm": summarize("medium"), "apl": summarize("large"),
        "per_class_ap": [_exact_mean([table[("all", c, i)] for i in range(len(thresholds))])
                         for c in range(num_classes)],
        "per_class_ap50": [table[("all", c, i50)] for c in range(num_classes)],
    }
