"""Box representations, IoU / CIoU and non-maximum suppression.

Tensor functions take boxes in corner format ``(x1, y1, x2, y2)`` along the
last dimension and broadcast over leading dimensions. :class:`BoundingBox`
is the record type used at the I/O boundary (labels, detections).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple, Sequence

import torch

EPS = 1e-7


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized center format.

    ``cx, cy, w, h`` are fractions of the image width/height. ``confidence``
    is only set on detections.
    """

    cx: float
    cy: float
    w: float
    h: float
    category_id: int = 0
    confidence: float | None = None

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_xyxy(cls, x1, y1, x2, y2, width=1.0, height=1.0, category_id=0, confidence=None):
        """Build from absolute corner coordinates on a ``width`` x ``height`` canvas."""
        return cls(
            cx=(x1 + x2) / 2 / width,
            cy=(y1 + y2) / 2 / height,
            w=(x2 - x1) / width,
            h=(y2 - y1) / height,
            category_id=category_id,
            confidence=confidence,
        )

    def to_xyxy(self, width=1.0, height=1.0) -> tuple[float, float, float, float]:
        return (
            (self.cx - self.w / 2) * width,
            (self.cy - self.h / 2) * height,
            (self.cx + self.w / 2) * width,
            (self.cy + self.h / 2) * height,
        )

    def with_confidence(self, confidence: float) -> "BoundingBox":
        return replace(self, confidence=confidence)


class CIoUComponents(NamedTuple):
    iou: torch.Tensor
    rho2: torch.Tensor
    c2: torch.Tensor
    v: torch.Tensor
    alpha: torch.Tensor


def xywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), dim=-1)


def xyxy_to_xywh(boxes: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack(((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1), dim=-1)


def _as_xyxy(box) -> torch.Tensor:
    if isinstance(box, BoundingBox):
        return torch.tensor(box.to_xyxy(), dtype=torch.float64)
    return torch.as_tensor(box, dtype=torch.float64)


def bbox_iou(a: torch.Tensor, b: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Elementwise IoU of broadcastable corner-format boxes."""
    iw = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]).clamp(min=0) * (a[..., 3] - a[..., 1]).clamp(min=0)
    area_b = (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)
    union = area_a + area_b - inter
    # zero-area boxes get IoU 0 rather than a 0/0
    return torch.where(union > 0, inter / (union + eps), torch.zeros_like(inter))


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU matrix between ``(N, 4)`` and ``(M, 4)`` boxes."""
    return bbox_iou(a[:, None, :], b[None, :, :])


def iou(a, b) -> float:
    """IoU of two boxes given as :class:`BoundingBox` or corner 4-sequences."""
    return float(bbox_iou(_as_xyxy(a), _as_xyxy(b), eps=0.0))


def ciou(
    pred: torch.Tensor, gt: torch.Tensor, eps: float = EPS, detach_alpha: bool = True
) -> tuple[torch.Tensor, CIoUComponents]:
    """Complete IoU between corner-format boxes.

    Returns ``iou - rho2 / c2 - alpha * v`` together with its components.
    With ``detach_alpha`` the trade-off weight is a constant for autograd.
    """
    px1, py1, px2, py2 = pred.unbind(-1)
    gx1, gy1, gx2, gy2 = gt.unbind(-1)
    pw, ph = px2 - px1, py2 - py1
    gw, gh = gx2 - gx1, gy2 - gy1

    iw = (torch.minimum(px2, gx2) - torch.maximum(px1, gx1)).clamp(min=0)
    ih = (torch.minimum(py2, gy2) - torch.maximum(py1, gy1)).clamp(min=0)
    inter = iw * ih
    # clamp rather than add: identical boxes give exactly 1
    union = (pw * ph + gw * gh - inter).clamp(min=eps)
    overlap = inter / union

    cw = torch.maximum(px2, gx2) - torch.minimum(px1, gx1)
    ch = torch.maximum(py2, gy2) - torch.minimum(py1, gy1)
    c2 = cw**2 + ch**2 + eps
    rho2 = ((px1 + px2 - gx1 - gx2) ** 2 + (py1 + py2 - gy1 - gy2) ** 2) / 4

    v = (4 / math.pi**2) * (torch.atan(gw / (gh + eps)) - torch.atan(pw / (ph + eps))) ** 2
    if detach_alpha:
        with torch.no_grad():
            alpha = v / (v - overlap + (1 + eps))
    else:
        alpha = v / (v - overlap + (1 + eps))
    value = overlap - (rho2 / c2 + alpha * v)
    return value, CIoUComponents(overlap, rho2, c2, v, alpha)


def ciou_loss(pred, gt, eps: float = EPS, detach_alpha: bool = True):
    """``1 - CIoU`` for a pair of boxes (or broadcastable batches of boxes).

    Accepts :class:`BoundingBox` instances or corner-format tensors/sequences
    and returns ``(loss, components)``.
    """
    value, comps = ciou(_as_xyxy(pred), _as_xyxy(gt), eps=eps, detach_alpha=detach_alpha)
    return 1 - value, comps


def nms_indices(
    boxes: torch.Tensor,
    scores: torch.Tensor,
    categories: torch.Tensor,
    iou_threshold: float = 0.65,
) -> torch.Tensor:
    """Per-category greedy NMS. Returns kept indices sorted by descending score."""
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.long)
    order = torch.argsort(scores, descending=True, stable=True)
    keep = []
    while len(order):
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        overlap = bbox_iou(boxes[i], boxes[rest]) > iou_threshold
        order = rest[~(overlap & (categories[rest] == categories[i]))]
    return torch.tensor(keep, dtype=torch.long)


def nms(
    dets: Iterable[BoundingBox],
    iou_threshold: float = 0.65,
    conf_threshold: float = 1e-3,
) -> list[BoundingBox]:
    """Drop low-confidence detections, then suppress same-category overlaps."""
    if not 0 < iou_threshold < 1:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    dets = [d for d in dets if (d.confidence or 0.0) >= conf_threshold]
    if not dets:
        return []
    boxes = torch.tensor([d.to_xyxy() for d in dets], dtype=torch.float64)
    scores = torch.tensor([d.confidence for d in dets], dtype=torch.float64)
    cats = torch.tensor([d.category_id for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, cats, iou_threshold).tolist()]


def boxes_to_tensor(boxes: Sequence[BoundingBox]) -> torch.Tensor:
    """``(N, 5)`` tensor of ``category, cx, cy, w, h``."""
    if not boxes:
        return torch.zeros((0, 5))
    return torch.tensor([[b.category_id, b.cx, b.cy, b.w, b.h] for b in boxes], dtype=torch.float32)
