from __future__ import annotations

import dataclasses
import random

import pytest
import torch

from deeploc.assign import AnchorSet, assign_batch
from deeploc.loss import LossConfig, LossWeights, deeploc_loss
from deeploc.model import ModelConfig, build, encode, placement_preset

from fd import fd_rel_error
from oracles import algorithm1_loss

ANCHORS = AnchorSet()
SIZE = 224
_TINY = {}


def tiny_model():
    if "m" not in _TINY:
        torch.manual_seed(0)
        cfg = ModelConfig(input_size=SIZE, schedule="tiny", placement=placement_preset("deeploc"))
        _TINY["m"] = build(cfg).double().eval()
    return _TINY["m"]


def random_targets(rng: random.Random, n_images: int, per_image: int) -> torch.Tensor:
    rows = []
    for i in range(n_images):
        for _ in range(per_image):
            w, h = rng.uniform(10, 150) / SIZE, rng.uniform(10, 150) / SIZE
            rows.append([i, rng.randrange(4), rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h])
    return torch.tensor(rows, dtype=torch.float64).reshape(-1, 6)


def random_instance(seed: int, n_images: int = 1, per_image: int = 2):
    """Tiny-model raw maps for random images plus random targets and their assignment."""
    rng = random.Random(seed)
    torch.manual_seed(seed)
    with torch.no_grad():
        raws = tiny_model()(torch.rand(n_images, 3, SIZE, SIZE, dtype=torch.float64))
    targets = random_targets(rng, n_images, per_image)
    return raws, targets, assign_batch(targets, ANCHORS, SIZE)


def oracle_total(raws, targets, assignment, cfg: LossConfig):
    w = cfg.weights
    return algorithm1_loss(
        [r.tolist() for r in raws],
        targets.tolist(),
        assignment.tolist(),
        ANCHORS.anchors,
        ANCHORS.strides,
        4,
        w.head_weights,
        w.lambda_loc,
        w.lambda_obj,
        w.lambda_cls,
        background_when_unmatched=cfg.background_obj_when_unmatched,
    )


def oracle_errors(n=50, seed=0):
    errs = []
    for i in range(n):
        raws, targets, assignment = random_instance(seed + i)
        got = deeploc_loss(raws, targets, assignment, ANCHORS)
        ref, _ = oracle_total(raws, targets, assignment, LossConfig())
        errs.append(abs(float(got.total) - ref))
    return errs


def test_matches_scalar_oracle():
    assert max(oracle_errors(8, seed=100)) < 1e-6


def test_components_match_oracle_with_two_images_and_background():
    raws, targets, assignment = random_instance(7, n_images=2, per_image=3)
    # drop every head-2 candidate so the no-match branch is exercised
    assignment = assignment[assignment[:, 1] != 2]
    for flag in (False, True):
        cfg = LossConfig(background_obj_when_unmatched=flag)
        got = deeploc_loss(raws, targets, assignment, ANCHORS, cfg)
        ref, (l_loc, l_obj, l_cls) = oracle_total(raws, targets, assignment, cfg)
        assert float(got.total) == pytest.approx(ref, abs=1e-6)
        assert (float(got.loc), float(got.obj), float(got.cls)) == pytest.approx((l_loc, l_obj, l_cls), abs=1e-9)


def test_total_invariant():
    raws, targets, assignment = random_instance(3, n_images=2)
    out = deeploc_loss(raws, targets, assignment, ANCHORS)
    w = LossWeights()
    expect = 2 * (w.lambda_loc * out.loc + w.lambda_obj * out.obj + w.lambda_cls * out.cls)
    assert float(out.total) == pytest.approx(float(expect), rel=1e-12)
    assert all(float(v) >= 0 for v in out)


def background_raws(n_images=1, fill=-30.0):
    return [torch.full((n_images, 27, s, s), fill, dtype=torch.float64) for s in (28, 14, 7)]


def test_no_candidates_and_background_is_zero():
    raws = background_raws()
    empty = torch.zeros((0, 6), dtype=torch.long)
    assert float(deeploc_loss(raws, torch.zeros(0, 6), empty, ANCHORS).total) == 0.0
    cfg = LossConfig(background_obj_when_unmatched=True)
    assert float(deeploc_loss(raws, torch.zeros(0, 6), empty, ANCHORS, cfg).total) < 1e-9


def perfect_instance():
    """One candidate whose decoded box equals its target, saturated logits."""
    raws = background_raws()
    head, anchor, row, col = 1, 1, 6, 5
    stride = ANCHORS.strides[head]
    aw, ah = ANCHORS.anchors[head][anchor]
    box = ((col + 0.7) * stride, (row + 0.4) * stride, aw * 1.3, ah * 0.8)
    t = encode(box, (aw, ah), stride, (row, col))
    base = anchor * 9
    raws[head][0, base : base + 4, row, col] = torch.tensor(t, dtype=torch.float64)
    raws[head][0, base + 4, row, col] = 30.0
    raws[head][0, base + 5 + 2, row, col] = 30.0
    targets = torch.tensor([[0, 2, box[0] / SIZE, box[1] / SIZE, box[2] / SIZE, box[3] / SIZE]], dtype=torch.float64)
    assignment = torch.tensor([[0, head, anchor, row, col, 0]])
    return raws, targets, assignment


def test_perfect_prediction():
    out = deeploc_loss(*perfect_instance(), ANCHORS)
    assert float(out.loc) < 1e-9 and float(out.obj) < 1e-9 and float(out.cls) < 1e-9
    assert float(out.total) < 1e-6


def test_lambda_linearity():
    raws, targets, assignment = random_instance(5)
    base = deeploc_loss(raws, targets, assignment, ANCHORS)
    for field in ("lambda_loc", "lambda_obj", "lambda_cls"):
        w = LossWeights()
        doubled = dataclasses.replace(w, **{field: 2 * getattr(w, field)})
        out = deeploc_loss(raws, targets, assignment, ANCHORS, LossConfig(weights=doubled))
        comp = {"lambda_loc": base.loc, "lambda_obj": base.obj, "lambda_cls": base.cls}[field]
        assert torch.equal(out.loc, base.loc) and torch.equal(out.obj, base.obj) and torch.equal(out.cls, base.cls)
        assert float(out.total - base.total) == pytest.approx(float(getattr(w, field) * comp), rel=1e-12, abs=1e-15)


def test_target_order_invariance():
    raws, targets, _ = random_instance(9, n_images=2, per_image=4)
    base = deeploc_loss(raws, targets, assign_batch(targets, ANCHORS, SIZE), ANCHORS)
    perm = torch.randperm(len(targets), generator=torch.Generator().manual_seed(0))
    shuffled = targets[perm]
    out = deeploc_loss(raws, shuffled, assign_batch(shuffled, ANCHORS, SIZE), ANCHORS)
    assert float(out.total) == pytest.approx(float(base.total), rel=1e-12)


def loss_gradient_error(seed=0):
    """FD check of the total w.r.t. randomly sampled raw-map entries (no stop-gradients)."""
    raws, targets, assignment = random_instance(seed)
    raws = [r.clone().requires_grad_(True) for r in raws]
    cfg = LossConfig(stop_gradients=False)
    return fd_rel_error(lambda: deeploc_loss(raws, targets, assignment, ANCHORS, cfg).total, raws, n_coords=40, seed=seed)


def test_loss_gradient_matches_finite_differences():
    assert loss_gradient_error(1) < 1e-3
    assert assigned_gradient_error(1) < 1e-3


def assigned_gradient_error(seed=0, h=1e-6):
    """FD check restricted to the channels of assigned candidates."""
    raws, targets, assignment = random_instance(seed)
    raws = [r.clone().requires_grad_(True) for r in raws]
    cfg = LossConfig(stop_gradients=False)
    fn = lambda: deeploc_loss(raws, targets, assignment, ANCHORS, cfg).total  # noqa: E731
    grads = torch.autograd.grad(fn(), raws, allow_unused=True)
    analytic, numeric = [], []
    for _, head, a, gy, gx, _ in assignment.tolist()[:8]:
        for k in range(9):
            idx = (0, a * 9 + k, gy, gx)
            old = float(raws[head].data[idx])
            with torch.no_grad():
                raws[head].data[idx] = old + h
                up = float(fn())
                raws[head].data[idx] = old - h
                dn = float(fn())
                raws[head].data[idx] = old
            numeric.append((up - dn) / (2 * h))
            analytic.append(float(grads[head][idx]))
    a, n = torch.tensor(analytic, dtype=torch.float64), torch.tensor(numeric, dtype=torch.float64)
    return float((a - n).norm() / n.norm())


def test_non_finite_raw_names_head():
    raws, targets, assignment = random_instance(2)
    raws = list(raws)
    raws[1] = raws[1].clone()
    raws[1][0, 0, 0, 0] = float("nan")
    with pytest.raises(FloatingPointError, match="head 1"):
        deeploc_loss(raws, targets, assignment, ANCHORS)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_obj=-1.0)
    raws, targets, assignment = random_instance(2)
    with pytest.raises(ValueError):
        deeploc_loss(raws, targets, assignment, ANCHORS, LossConfig(LossWeights(head_weights=(1.0, 1.0))))
