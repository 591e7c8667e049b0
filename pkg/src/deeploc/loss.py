"""Composite detection loss: objectness, CIoU localization and classification.

Per FPN head the assigned candidates give a localization term
``mean(1 - CIoU)`` and a one-vs-all classification BCE; objectness is a BCE
over every cell/anchor against the (detached, clamped) CIoU of the matched
candidates, weighted by the head's balance factor. The weighted components
are summed and multiplied by the batch size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F

from .assign import AnchorSet
from .geometry import ciou, xywh_to_xyxy
from .model import split_raw


@dataclass(frozen=True)
class LossWeights:
    head_weights: tuple = (4.0, 1.0, 0.4)
    lambda_loc: float = 0.05
    lambda_obj: float = 0.7
    lambda_cls: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "head_weights", tuple(float(w) for w in self.head_weights))
        if any(w < 0 for w in (*self.head_weights, self.lambda_loc, self.lambda_obj, self.lambda_cls)):
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossConfig:
    weights: LossWeights = LossWeights()
    # supervise objectness towards 0 on heads that received no candidates
    background_obj_when_unmatched: bool = False
    # detach alpha inside CIoU and the objectness target (training default)
    stop_gradients: bool = True


class DetectionBatchLoss(NamedTuple):
    loc: torch.Tensor
    obj: torch.Tensor
    cls: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict:
        return {k: float(v.detach()) for k, v in self._asdict().items()}


def candidate_boxes(ps: torch.Tensor, cells_xy: torch.Tensor, anchor_wh_grid: torch.Tensor) -> torch.Tensor:
    """Decode gathered predictions ``(K, 5+C)`` into grid-unit corner boxes."""
    sig = ps[:, :4].sigmoid()
    xy = sig[:, :2] * 2 - 0.5 + cells_xy
    wh = (sig[:, 2:4] * 2) ** 2 * anchor_wh_grid
    return xywh_to_xyxy(torch.cat([xy, wh], 1))


def deeploc_loss(
    raws: Sequence[torch.Tensor],
    targets: torch.Tensor,
    assignment: torch.Tensor,
    anchors: AnchorSet,
    cfg: LossConfig = LossConfig(),
    num_categories: int = 4,
) -> DetectionBatchLoss:
    """Loss for one batch.

    ``targets``: ``(T, 6)`` rows of image, category, cx, cy, w, h (normalized).
    ``assignment``: ``(K, 6)`` rows of image, head, anchor, cell_y, cell_x,
    target_row as produced by :func:`deeploc.assign.assign_batch`.
    """
    w = cfg.weights
    if len(w.head_weights) != len(raws):
        raise ValueError(f"{len(w.head_weights)} head weights for {len(raws)} heads")
    ref = raws[0]
    zero = ref.new_zeros(())
    loc, obj, cls = zero, zero, zero
    batch = ref.shape[0]

    for h, raw in enumerate(raws):
        if not torch.isfinite(raw).all():
            raise FloatingPointError(f"non-finite values in raw output of head {h} (stride {anchors.strides[h]})")
        p = split_raw(raw, num_categories)  # (B, 3, H, W, 5+C)
        grid = raw.shape[-1]
        sel = assignment[assignment[:, 1] == h]
        tobj = torch.zeros_like(p[..., 4])

        if len(sel):
            b, a, gy, gx, t = sel[:, 0], sel[:, 2], sel[:, 3], sel[:, 4], sel[:, 5]
            ps = p[b, a, gy, gx]
            anchor_grid = anchors.tensor(h, ps.dtype).to(ps.device)[a] / anchors.strides[h]
            pbox = candidate_boxes(ps, torch.stack([gx, gy], 1).to(ps.dtype), anchor_grid)
            tbox = xywh_to_xyxy(targets[t, 2:6].to(ps.dtype) * grid)
            score, _ = ciou(pbox, tbox, detach_alpha=cfg.stop_gradients)
            loc = loc + (1.0 - score).mean()

            quality = score.clamp(0, 1)
            if cfg.stop_gradients:
                quality = quality.detach()
            # duplicates (one cell matched by several targets) keep the best CIoU
            flat = ((b * 3 + a) * p.shape[2] + gy) * p.shape[3] + gx
            tobj = tobj.flatten().scatter_reduce(0, flat, quality, reduce="amax", include_self=True).view_as(tobj)

            onehot = F.one_hot(targets[t, 1].long(), num_categories).to(ps.dtype)
            cls = cls + F.binary_cross_entropy_with_logits(ps[:, 5:], onehot)
            obj = obj + w.head_weights[h] * F.binary_cross_entropy_with_logits(p[..., 4], tobj)
        elif cfg.background_obj_when_unmatched:
            obj = obj + w.head_weights[h] * F.binary_cross_entropy_with_logits(p[..., 4], tobj)

    total = batch * (w.lambda_loc * loc + w.lambda_obj * obj + w.lambda_cls * cls)
    return DetectionBatchLoss(loc, obj, cls, total)
