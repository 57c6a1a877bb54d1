import numpy as np
import pytest

from dfam_detr.evaluation import (AREA_RANGES, IOU_THRESHOLDS, Detections, decode_detections,
                                  evaluate_ap)
from dfam_detr.matcher import GroundTruthSet

from oracles import brute_force_ap

SIZE = 128


def to_cxcywh(box):
    x0, y0, x1, y1 = box
    return [(x0 + x1) / 2 / SIZE, (y0 + y1) / 2 / SIZE, (x1 - x0) / SIZE, (y1 - y0) / SIZE]


def package_inputs(images):
    preds, gts = [], []
    for img in images:
        g = img["gt"]
        gts.append(GroundTruthSet(np.array([lab for _, lab, _ in g], dtype=np.int64),
                                  np.array([to_cxcywh(b) for b, _, _ in g]).reshape(-1, 4),
                                  np.array([c for _, _, c in g], dtype=bool)))
        d = img["det"]
        preds.append(Detections(np.array([to_cxcywh(b) for b, _, _ in d]).reshape(-1, 4),
                                np.array([s for _, _, s in d], dtype=np.float64),
                                np.array([lab for _, lab, _ in d], dtype=np.int64)))
    return preds, gts


def evaluate(images, num_classes=1):
    preds, gts = package_inputs(images)
    return evaluate_ap(preds, gts, [(SIZE, SIZE)] * len(images), num_classes)


def random_box(r, max_side=100):
    w, h = r.integers(2, max_side, size=2)
    x0 = r.integers(0, SIZE - w + 1)
    y0 = r.integers(0, SIZE - h + 1)
    return (int(x0), int(y0), int(x0 + w), int(y0 + h))


def jitter(r, box):
    x0, y0, x1, y1 = box
    dx0, dy0, dx1, dy1 = r.integers(-6, 7, size=4)
    nx0, ny0 = min(max(x0 + dx0, 0), SIZE - 2), min(max(y0 + dy0, 0), SIZE - 2)
    nx1 = min(max(x1 + dx1, nx0 + 1), SIZE)
    ny1 = min(max(y1 + dy1, ny0 + 1), SIZE)
    return (int(nx0), int(ny0), int(nx1), int(ny1))


def random_instance(seed):
    r = np.random.default_rng([seed, 77])
    num_classes = int(r.integers(1, 4))
    images = []
    for _ in range(int(r.integers(1, 5))):
        gt = [(random_box(r), int(r.integers(0, num_classes)), bool(r.uniform() < 0.1))
              for _ in range(int(r.integers(0, 5)))]
        det = []
        for box, lab, _ in gt:
            if r.uniform() < 0.8:
                det.append((jitter(r, box), lab if r.uniform() < 0.9 else int(r.integers(0, num_classes)),
                            float(np.round(r.uniform(), 2))))
        for _ in range(int(r.integers(0, 4))):
            det.append((random_box(r), int(r.integers(0, num_classes)), float(np.round(r.uniform(), 2))))
        images.append({"gt": gt, "det": det})
    return images, num_classes


# -- hand cases -----------------------------------------------------------------------

def test_perfect_detection_scores_one_everywhere():
    box = (10, 20, 60, 100)
    rep = evaluate([{"gt": [(box, 0, False)], "det": [(box, 0, 0.9)]}])
    assert rep.ap == 1.0 and rep.ap50 == 1.0 and rep.ap75 == 1.0


def test_iou_point_six_counts_at_fifty_not_seventy_five():
    gt = (0, 0, 100, 60)
    det = (0, 0, 60, 60)  # IoU 0.6
    rep = evaluate([{"gt": [(gt, 0, False)], "det": [(det, 0, 0.8)]}])
    assert rep.ap50 == 1.0
    assert rep.ap75 == 0.0


def test_no_predictions_give_zero_ap():
    rep = evaluate([{"gt": [((5, 5, 50, 50), 0, False)], "det": []}])
    assert rep.ap == 0.0 and rep.ap50 == 0.0


def test_partition_without_ground_truth_is_none():
    rep = evaluate([{"gt": [((0, 0, 100, 100), 0, False)], "det": [((0, 0, 100, 100), 0, 0.5)]}])
    assert rep.apl == 1.0
    assert rep.aps is None and rep.apm is None
    empty = evaluate([{"gt": [], "det": [((0, 0, 10, 10), 0, 0.5)]}])
    assert empty.ap is None and empty.per_class_ap == [None]


def test_duplicate_detection_is_a_false_positive():
    box = (10, 10, 60, 60)
    rep = evaluate([{"gt": [(box, 0, False)], "det": [(box, 0, 0.9), (box, 0, 0.8)]}])
    assert rep.ap50 == 1.0  # the duplicate ranks below full recall
    low_first = evaluate([{"gt": [(box, 0, False)],
                           "det": [((70, 70, 120, 120), 0, 0.95), (box, 0, 0.5)]}])
    assert low_first.ap50 == pytest.approx(0.5)


def test_crowd_region_absorbs_detections():
    crowd = (0, 0, 128, 128)
    real = (10, 10, 40, 40)
    imgs = [{"gt": [(real, 0, False), (crowd, 0, True)],
             "det": [(real, 0, 0.9), ((60, 60, 100, 100), 0, 0.8), ((70, 70, 110, 110), 0, 0.7)]}]
    assert evaluate(imgs).ap == 1.0


# -- oracle -----------------------------------------------------------------------------

@pytest.mark.parametrize("block", range(5))
def test_matches_brute_force_exactly(block):
    for seed in range(block * 10, block * 10 + 10):
        images, k = random_instance(seed)
        got = evaluate(images, k).as_dict()
        want = brute_force_ap(images, k, IOU_THRESHOLDS, AREA_RANGES)
        assert got == want, f"instance {seed}"


def test_raising_a_true_positive_score_never_lowers_ap():
    # well-separated objects, so every detection can only match its own object
    r = np.random.default_rng(5)
    for trial in range(20):
        gts = [((i * 30, 0, i * 30 + 20, 20), 0, False) for i in range(4)]
        dets = [(g[0], 0, float(s)) for g, s in zip(gts, r.uniform(0.1, 0.9, 4))]
        dets += [((i * 30, 60, i * 30 + 20, 80), 0, float(r.uniform(0.1, 0.9))) for i in range(3)]
        base = evaluate([{"gt": gts, "det": dets}]).ap50
        i = int(r.integers(0, 4))
        raised = list(dets)
        raised[i] = (dets[i][0], 0, min(dets[i][2] + 0.3, 0.99))
        assert evaluate([{"gt": gts, "det": raised}]).ap50 >= base


# -- decoding ---------------------------------------------------------------------------

def test_decode_keeps_top_hundred_by_sigmoid_probability():
    r = np.random.default_rng(0)
    logits = r.standard_normal((60, 3))
    boxes = r.uniform(0.1, 0.9, (60, 4))
    det = decode_detections(logits, boxes, max_detections=100)
    assert len(det.scores) == 100
    assert np.all(np.diff(det.scores) <= 0)
    prob = 1 / (1 + np.exp(-logits))
    assert np.allclose(det.scores, np.sort(prob.ravel())[::-1][:100])
    q = np.argmax(prob.ravel()) // 3
    assert np.array_equal(det.boxes[0], boxes[q]) and det.labels[0] == np.argmax(prob.ravel()) % 3


def test_decode_applies_score_floor():
    logits = np.array([[3.0, -3.0], [0.0, -5.0]])
    det = decode_detections(logits, np.full((2, 4), 0.5), score_floor=0.4)
    assert det.labels.tolist() == [0, 0] and len(det.scores) == 2
