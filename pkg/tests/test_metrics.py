from __future__ import annotations

import json
import math
import random

import pytest

from deeploc.geometry import BoundingBox
from deeploc.metrics import evaluate_detections

from oracles import ap_cutoff_enumeration

NAMES = ["a"]


def box(x1, y1, x2, y2, cat=0, conf=None):
    return BoundingBox.from_xyxy(x1, y1, x2, y2, 1, 1, cat, conf)


def random_set(rng: random.Random, n_images=3, n_gt=10, n_det=30):
    """GT boxes plus detections: jittered copies of GTs and free-floating boxes."""
    gts = {f"im{i}": [] for i in range(n_images)}
    for _ in range(n_gt):
        x, y = rng.uniform(0, 0.7), rng.uniform(0, 0.7)
        gts[f"im{rng.randrange(n_images)}"].append(box(x, y, x + rng.uniform(0.05, 0.3), y + rng.uniform(0.05, 0.3)))
    all_gt = [(k, g) for k, v in gts.items() for g in v]
    dets = {k: [] for k in gts}
    for _ in range(n_det):
        conf = rng.random()
        if all_gt and rng.random() < 0.6:
            k, g = rng.choice(all_gt)
            x1, y1, x2, y2 = g.to_xyxy()
            w, h = (x2 - x1) * rng.uniform(0.7, 1.3), (y2 - y1) * rng.uniform(0.7, 1.3)
            j = rng.uniform(0, 0.4) * (x2 - x1)
            x1 = min(max(x1 + rng.uniform(-j, j), 0), 0.9)
            y1 = min(max(y1 + rng.uniform(-j, j), 0), 0.9)
            dets[k].append(box(x1, y1, min(x1 + w, 1), min(y1 + h, 1), conf=conf))
        else:
            k = f"im{rng.randrange(n_images)}"
            x, y = rng.uniform(0, 0.7), rng.uniform(0, 0.7)
            dets[k].append(box(x, y, x + rng.uniform(0.05, 0.3), y + rng.uniform(0.05, 0.3), conf=conf))
    return dets, gts


def oracle_ap(dets, gts, thr=0.5):
    flat = [(d.confidence, k, d.to_xyxy()) for k, v in dets.items() for d in v]
    return ap_cutoff_enumeration(flat, {k: [g.to_xyxy() for g in v] for k, v in gts.items()}, thr)


def ap_oracle_errors(n=100, seed=0):
    rng = random.Random(seed)
    errs = []
    for _ in range(n):
        dets, gts = random_set(rng)
        if not any(gts.values()):
            continue
        errs.append(abs(evaluate_detections(dets, gts, NAMES).map50 - oracle_ap(dets, gts)))
    return errs


def test_single_true_positive():
    gts = {"x": [box(0, 0, 1, 1)]}
    # IoU 0.6 by shrinking width
    r = evaluate_detections({"x": [box(0, 0, 0.6, 1, conf=0.9)]}, gts, NAMES)
    assert r.map50 == 1.0
    r = evaluate_detections({"x": [box(0, 0, 0.4, 1, conf=0.9)]}, gts, NAMES)
    assert r.map50 == 0.0


def test_matches_cutoff_enumeration():
    assert max(ap_oracle_errors(20, seed=1)) < 1e-9


def test_order_invariance():
    rng = random.Random(2)
    dets, gts = random_set(rng)
    shuffled = {k: rng.sample(v, len(v)) for k, v in reversed(list(dets.items()))}
    a, b = evaluate_detections(dets, gts, NAMES), evaluate_detections(shuffled, gts, NAMES)
    assert (a.map50, a.map50_95, a.f1) == (b.map50, b.map50_95, b.f1)


def test_low_confidence_addition_never_helps():
    rng = random.Random(3)
    for _ in range(30):
        dets, gts = random_set(rng)
        base = evaluate_detections(dets, gts, NAMES).map50
        for k in ("im0", "im1", "im2"):
            x, y = rng.uniform(0, 0.7), rng.uniform(0, 0.7)
            extra = {kk: list(v) for kk, v in dets.items()}
            extra[k].append(box(x, y, x + 0.2, y + 0.2, conf=1e-6))
            after = evaluate_detections(extra, gts, NAMES).map50
            assert after == pytest.approx(oracle_ap(extra, gts), abs=1e-9)
            # a tail point is either a false positive (AP unchanged) or one extra
            # true positive, which adds at most 1/n_gt of recall
            assert after <= base + 1 / sum(len(v) for v in gts.values()) + 1e-12
        # a tail false positive on an image without labels leaves AP untouched
        extra = {kk: list(v) for kk, v in dets.items()}
        extra["empty"] = [box(0.1, 0.1, 0.3, 0.3, conf=1e-6)]
        assert evaluate_detections(extra, {**gts, "empty": []}, NAMES).map50 == pytest.approx(base, abs=1e-12)


def test_ground_truth_as_detections_scores_one():
    rng = random.Random(4)
    _, gts = random_set(rng, n_gt=12)
    dets = {k: [g.with_confidence(1.0) for g in v] for k, v in gts.items()}
    r = evaluate_detections(dets, gts, NAMES)
    assert (r.precision, r.recall, r.f1, r.map50, r.map50_95) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_map50_95_not_above_map50():
    rng = random.Random(5)
    for _ in range(30):
        dets, gts = random_set(rng)
        r = evaluate_detections(dets, gts, NAMES)
        assert r.map50_95 <= r.map50 + 1e-12


def test_metrics_in_unit_interval_and_nan_for_absent_category():
    rng = random.Random(6)
    dets, gts = random_set(rng)
    r = evaluate_detections(dets, gts, ["a", "b"])
    for v in (r.precision, r.recall, r.f1, r.map50, r.map50_95):
        assert 0 <= v <= 1
    assert math.isnan(r.categories[1].ap50) and r.labels == r.categories[0].labels


def test_empty_split_errors():
    with pytest.raises(ValueError):
        evaluate_detections({}, {}, NAMES)
    with pytest.raises(ValueError):
        evaluate_detections({}, {"x": []}, NAMES)


def test_report_save(tmp_path):
    rng = random.Random(7)
    dets, gts = random_set(rng)
    r = evaluate_detections(dets, gts, ["a", "b"])
    r.save(tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["all"]["mAP50"] == pytest.approx(r.map50)
    assert (tmp_path / "report.csv").exists() and (tmp_path / "pr_a.csv").exists()
    assert (tmp_path / "pr_curve.png").stat().st_size > 0
