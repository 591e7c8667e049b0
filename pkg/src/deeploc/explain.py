"""GradCAM++ heatmaps for detector predictions and overlay rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import batched_nms

from .geometry import BoundingBox, xywh_to_xyxy
from .model import Detector, decode_head, split_raw


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W) in [0, 1]
    source_layer: str
    target: dict
    zero_gradient: bool = False

    def metadata(self) -> dict:
        return {
            "source_layer": self.source_layer,
            "target": self.target,
            "zero_gradient": self.zero_gradient,
            "shape": list(self.values.shape),
        }


@dataclass(frozen=True)
class DetectionTarget:
    """A pre-NMS prediction slot: head, anchor, grid cell and category."""

    head: int
    anchor: int
    cell_y: int
    cell_x: int
    category: int
    box: BoundingBox | None = None

    def to_dict(self) -> dict:
        out = {"head": self.head, "anchor": self.anchor, "cell_y": self.cell_y, "cell_x": self.cell_x,
               "category": self.category}
        if self.box is not None:
            out["box"] = [self.box.cx, self.box.cy, self.box.w, self.box.h]
            out["confidence"] = self.box.confidence
        return out


def default_layer(head: int) -> str:
    """Feature entering the head's RepConv (after any SWCSP/attention blocks)."""
    return f"heads.{head}.site"


def detection_score(raws, target: DetectionTarget, num_categories: int) -> torch.Tensor:
    """σ(obj)·σ(cls_c) at the target slot (pre-NMS)."""
    p = split_raw(raws[target.head], num_categories)[0, target.anchor, target.cell_y, target.cell_x]
    return p[4].sigmoid() * p[5 + target.category].sigmoid()


@torch.no_grad()
def detect_with_slots(
    model: Detector, image: torch.Tensor, conf_threshold: float = 1e-3, iou_threshold: float = 0.65, max_det: int = 300
) -> list[DetectionTarget]:
    """Run inference on one ``(1, 3, S, S)`` image and keep each detection's slot."""
    model.eval()
    cfg = model.cfg
    raws = model(image)
    rows, slots = [], []
    for h, raw in enumerate(raws):
        dec = decode_head(raw.float(), cfg.anchors.tensor(h), cfg.anchors.strides[h], cfg.num_categories)[0]
        a, gy, gx = torch.meshgrid(*(torch.arange(n) for n in dec.shape[:3]), indexing="ij")
        rows.append(dec.reshape(-1, 6))
        slots.append(torch.stack([torch.full_like(a, h), a, gy, gx], -1).reshape(-1, 4))
    rows, slots = torch.cat(rows), torch.cat(slots)
    keep = rows[:, 4] >= conf_threshold
    rows, slots = rows[keep], slots[keep]
    s = cfg.input_size
    xyxy = xywh_to_xyxy(rows[:, :4]).clamp(0, s)
    valid = ((xyxy[:, 2] - xyxy[:, 0]) > 0) & ((xyxy[:, 3] - xyxy[:, 1]) > 0)
    rows, slots, xyxy = rows[valid], slots[valid], xyxy[valid]
    order = batched_nms(xyxy, rows[:, 4], rows[:, 5].long(), iou_threshold)[:max_det]
    out = []
    for k in order.tolist():
        h, a, gy, gx = slots[k].tolist()
        cat = int(rows[k, 5])
        box = BoundingBox.from_xyxy(*xyxy[k].tolist(), s, s, cat, float(rows[k, 4]))
        out.append(DetectionTarget(h, a, gy, gx, cat, box))
    return out


def _normalize(cam: torch.Tensor) -> torch.Tensor:
    lo, hi = cam.min(), cam.max()
    if hi - lo <= 0:
        return torch.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def gradcam_pp(
    model: nn.Module,
    image: torch.Tensor,
    score_fn: Callable[[object], torch.Tensor],
    layer: str,
    target_meta: dict | None = None,
) -> Heatmap:
    """GradCAM++ over the activation produced by submodule ``layer``.

    ``score_fn`` maps the model output to a scalar score. Channel weights are
    ``sum_ij alpha_ij * relu(dS/dA_ij)`` with
    ``alpha = g^2 / (2 g^2 + sum(A) g^3)``; the map is the ReLU of the
    weighted channel sum, bilinearly upsampled and min-max normalized.
    """
    modules = dict(model.named_modules())
    if layer not in modules:
        raise KeyError(f"no submodule named {layer!r}")
    if image.ndim != 4 or image.shape[0] != 1:
        raise ValueError(f"expected a single image of shape (1, C, H, W), got {tuple(image.shape)}")

    store = {}

    def hook(_m, _inp, out):
        if not (isinstance(out, torch.Tensor) and out.ndim == 4):
            raise ValueError(f"layer {layer!r} does not produce a (B, C, H, W) feature map")
        store["act"] = out
        if out.requires_grad:
            out.register_hook(lambda g: store.__setitem__("grad", g))

    was_training = model.training
    model.eval()
    handle = modules[layer].register_forward_hook(hook)
    try:
        with torch.enable_grad():
            x = image.detach().clone().requires_grad_(True)
            score = score_fn(model(x))
            if score.requires_grad:
                score.backward()
    finally:
        handle.remove()
        model.train(was_training)
        model.zero_grad(set_to_none=True)

    act = store["act"].detach()[0]
    grad = store.get("grad")
    grad = torch.zeros_like(act) if grad is None else grad.detach()[0]
    zero = bool((grad == 0).all())
    size = tuple(image.shape[-2:])
    if zero:
        return Heatmap(np.zeros(size, dtype=np.float32), layer, target_meta or {}, zero_gradient=True)

    g2, g3 = grad**2, grad**3
    denom = 2 * g2 + act.sum((1, 2), keepdim=True) * g3
    alpha = torch.where(grad != 0, g2 / torch.where(denom != 0, denom, torch.ones_like(denom)), torch.zeros_like(grad))
    weights = (alpha * F.relu(grad)).sum((1, 2))
    cam = F.relu((weights[:, None, None] * act).sum(0))
    cam = F.interpolate(cam[None, None], size=size, mode="bilinear", align_corners=False)[0, 0]
    values = _normalize(cam).clamp(0, 1).cpu().numpy().astype(np.float32)
    return Heatmap(values, layer, target_meta or {}, zero_gradient=False)


def explain_detection(model: Detector, image: torch.Tensor, target: DetectionTarget, layer: str | None = None) -> Heatmap:
    layer = layer or default_layer(target.head)
    nc = model.cfg.num_categories
    return gradcam_pp(model, image, lambda raws: detection_score(raws, target, nc), layer, target.to_dict())


# --------------------------------------------------------------------- output


def render_overlay(
    image_bgr: np.ndarray,
    heatmap: Heatmap,
    box: BoundingBox | None,
    label: str = "",
    alpha: float = 0.45,
    inset_frac: float = 0.35,
) -> np.ndarray:
    """Image with the box, probability text and a colour-mapped heatmap inset.

    ``image_bgr`` must be the network-resolution image the heatmap refers to.
    """
    canvas = image_bgr.copy()
    h, w = canvas.shape[:2]
    colored = cv2.applyColorMap((heatmap.values * 255).astype(np.uint8), cv2.COLORMAP_JET)
    colored = cv2.resize(colored, (w, h))
    blended = cv2.addWeighted(canvas, 1 - alpha, colored, alpha, 0)
    if box is not None:
        x1, y1, x2, y2 = (int(round(v)) for v in box.to_xyxy(w, h))
        cv2.rectangle(canvas, (x1, y1), (x2, y2), (0, 255, 0), 2)
        cv2.rectangle(blended, (x1, y1), (x2, y2), (0, 255, 0), 2)
        text = f"{label} {box.confidence:.2f}" if box.confidence is not None else label
        cv2.putText(canvas, text.strip(), (x1, max(12, y1 - 4)), cv2.FONT_HERSHEY_SIMPLEX, 0.45, (0, 255, 0), 1)
    iw, ih = max(1, int(w * inset_frac)), max(1, int(h * inset_frac))
    inset = cv2.resize(blended, (iw, ih))
    cv2.rectangle(inset, (0, 0), (iw - 1, ih - 1), (255, 255, 255), 1)
    canvas[0:ih, w - iw : w] = inset
    return canvas


def save_explanation(path: str | Path, image_bgr: np.ndarray, heatmap: Heatmap, box: BoundingBox | None, label: str = ""):
    """Write ``<path>.png`` and a ``<path>.json`` sidecar with target metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    png = path.with_suffix(".png")
    if not cv2.imwrite(str(png), render_overlay(image_bgr, heatmap, box, label)):
        raise OSError(f"could not write {png}")
    meta = {**heatmap.metadata(), "label": label}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return png
