from __future__ import annotations

import math
import random

import torch

from deeploc.assign import AnchorSet, assign, assign_batch, center_predicate, size_predicate
from deeploc.geometry import BoundingBox

from oracles import assign_bruteforce

ANCHORS = AnchorSet()


def random_targets(rng: random.Random, n: int, input_size: int = 640) -> list[BoundingBox]:
    """Log-uniform sizes from 4 to 600 px so every head and ratio branch is hit."""
    out = []
    for _ in range(n):
        w = math.exp(rng.uniform(math.log(4), math.log(600))) / input_size
        h = math.exp(rng.uniform(math.log(4), math.log(600))) / input_size
        cx = rng.uniform(w / 2, 1 - w / 2)
        cy = rng.uniform(h / 2, 1 - h / 2)
        out.append(BoundingBox(cx, cy, w, h, rng.randrange(4)))
    return out


def as_set(entries):
    return {(e.head, e.cell_y, e.cell_x, e.anchor, e.target) for e in entries}


def oracle(targets, ratio=4.0, radius=0.5):
    return assign_bruteforce([(b.cx, b.cy, b.w, b.h) for b in targets], ANCHORS.anchors, ANCHORS.strides, 640, ratio, radius)


def test_anchor_shaped_target_on_small_head():
    # 12x16 px, centred in the upper-left quadrant of cell (10, 10) at stride 8
    cx, cy = (10 + 0.3) * 8 / 640, (10 + 0.3) * 8 / 640
    box = BoundingBox(cx, cy, 12 / 640, 16 / 640)
    entries = [e for e in assign([box], ANCHORS, 640) if e.head == 0 and e.anchor == 0]
    assert {(e.cell_y, e.cell_x) for e in entries} == {(10, 10), (10, 9), (9, 10)}


def test_ratio_ten_gives_nothing():
    # 1.2 x 1.6 px: a tenth of the smallest anchor, so the ratio is >= 10 for all anchors
    box = BoundingBox(0.5, 0.5, 1.2 / 640, 1.6 / 640)
    assert assign([box], ANCHORS, 640) == []


def test_matches_bruteforce():
    rng = random.Random(0)
    for _ in range(20):
        targets = random_targets(rng, 50)
        assert as_set(assign(targets, ANCHORS, 640)) == oracle(targets)


def test_entries_satisfy_both_predicates():
    rng = random.Random(1)
    targets = random_targets(rng, 40)
    for e in assign(targets, ANCHORS, 640):
        box = targets[e.target]
        grid = 640 // ANCHORS.strides[e.head]
        assert size_predicate(box, ANCHORS.anchors[e.head][e.anchor], 640)
        assert center_predicate(box, e.cell_y, e.cell_x, grid)


def shrink_is_monotone(targets):
    base = as_set(assign(targets, ANCHORS, 640))
    for ratio, radius in ((3.0, 0.5), (4.0, 0.25), (2.0, 0.0)):
        if not as_set(assign(targets, ANCHORS, 640, ratio, radius)) <= base:
            return False
    return True


def test_monotone_under_threshold_shrinking():
    rng = random.Random(2)
    assert all(shrink_is_monotone(random_targets(rng, 10)) for _ in range(30))


def test_permutation_equivariance():
    rng = random.Random(3)
    targets = random_targets(rng, 25)
    perm = list(range(25))
    rng.shuffle(perm)
    permuted = [targets[i] for i in perm]
    base = as_set(assign(targets, ANCHORS, 640))
    moved = {(h, r, c, a, perm[t]) for h, r, c, a, t in as_set(assign(permuted, ANCHORS, 640))}
    assert moved == base


def test_batch_matches_per_image():
    rng = random.Random(4)
    images = [random_targets(rng, rng.randrange(0, 6)) for _ in range(4)]
    rows, offsets = [], []
    for i, boxes in enumerate(images):
        offsets.append(len(rows))
        rows.extend([i, b.category_id, b.cx, b.cy, b.w, b.h] for b in boxes)
    t = torch.tensor(rows, dtype=torch.float32).reshape(-1, 6)
    got = {tuple(r) for r in assign_batch(t, ANCHORS, 640).tolist()}
    want = set()
    for i, boxes in enumerate(images):
        # float32 targets, matching the batch path's input
        boxes32 = [BoundingBox(*(float(v) for v in t[offsets[i] + k, 2:6]), b.category_id) for k, b in enumerate(boxes)]
        for e in assign(boxes32, ANCHORS, 640):
            want.add((i, e.head, e.anchor, e.cell_y, e.cell_x, offsets[i] + e.target))
    assert got == want


def test_empty_targets():
    assert assign([], ANCHORS, 640) == []
    assert assign_batch(torch.zeros(0, 6), ANCHORS, 640).shape == (0, 6)
