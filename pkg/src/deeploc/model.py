"""YOLOv7-style detector with optional Swin (SWCSP) and GAM/CBAM insertions.

Graph: CBS stem -> ELAN stages with MP transitions -> SPPCSPC bridge ->
top-down/bottom-up FPN neck with UP and ELAN-H -> per-head
[SWCSP -> attention -> RepConv -> 1x1 predict] at strides 8/16/32.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import torch
import torch.nn as nn
from torchvision.ops import batched_nms

from .assign import AnchorSet
from .blocks import CBS, ELAN, SWCSP, UP, AttentionConfig, MPDown, RepConv, SPPCSPC, SwinConfig, attention_block
from .geometry import BoundingBox, xywh_to_xyxy

SITES = ("backbone", "head1", "head2", "head3")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PlacementConfig:
    swin: frozenset = frozenset()
    attention: frozenset = frozenset()
    attention_kind: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "swin", frozenset(self.swin))
        object.__setattr__(self, "attention", frozenset(self.attention))
        for s in self.swin | self.attention:
            if s not in SITES:
                raise ConfigError(f"unknown placement site {s!r}; expected one of {SITES}")
        if self.attention_kind not in ("GAM", "CBAM", "none"):
            raise ConfigError(f"attention_kind must be GAM, CBAM or none, got {self.attention_kind!r}")
        if self.attention and self.attention_kind == "none":
            raise ConfigError("attention placements given but attention_kind is 'none'")

    def to_dict(self) -> dict:
        return {"swin": sorted(self.swin), "attention": sorted(self.attention), "attention_kind": self.attention_kind}


ALL_HEADS = frozenset({"head1", "head2", "head3"})

VARIANTS = {
    "yolov7": PlacementConfig(),
    "cbam_ba": PlacementConfig(attention=ALL_HEADS, attention_kind="CBAM"),
    "gam_ba": PlacementConfig(attention=ALL_HEADS, attention_kind="GAM"),
    "gam_bh1": PlacementConfig(attention={"head1"}, attention_kind="GAM"),
    "gam_bh2": PlacementConfig(attention={"head2"}, attention_kind="GAM"),
    "gam_bh3": PlacementConfig(attention={"head3"}, attention_kind="GAM"),
    "sw_ba": PlacementConfig(swin=ALL_HEADS),
    "sw_b_ba": PlacementConfig(swin=ALL_HEADS | {"backbone"}),
    "sw_cbam_ba": PlacementConfig(swin=ALL_HEADS, attention=ALL_HEADS, attention_kind="CBAM"),
    "deeploc": PlacementConfig(swin=ALL_HEADS, attention=ALL_HEADS, attention_kind="GAM"),
}


def placement_preset(name: str) -> PlacementConfig:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 672
    schedule: str = "full"
    placement: PlacementConfig = field(default_factory=lambda: VARIANTS["deeploc"])
    num_categories: int = 4
    anchors: AnchorSet = field(default_factory=AnchorSet)
    swin: SwinConfig | None = None
    attention_reduction: int = 4
    swcsp_depth: int = 2
    head_block_order: str = "swin_first"
    bn_momentum: float = 0.03

    def __post_init__(self):
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ConfigError(f"bn_momentum must lie in (0, 1], got {self.bn_momentum}")
        if self.schedule not in ("full", "tiny"):
            raise ConfigError(f"schedule must be 'full' or 'tiny', got {self.schedule!r}")
        if self.input_size % 32:
            raise ConfigError(f"input_size must be divisible by 32, got {self.input_size}")
        if self.head_block_order not in ("swin_first", "attention_first"):
            raise ConfigError(f"head_block_order must be swin_first or attention_first, got {self.head_block_order!r}")
        if self.swin is None:
            head_dim = 32 if self.schedule == "full" else 8
            object.__setattr__(self, "swin", SwinConfig(head_dim=head_dim))
        if self.placement.swin:
            w = self.swin.window_size
            coarse = self.input_size // 32
            if coarse % w:
                good = 32 * w * max(1, round(coarse / w))
                raise ConfigError(
                    f"input_size {self.input_size} gives a {coarse}x{coarse} stride-32 map, which is not a "
                    f"multiple of the Swin window {w}; use e.g. input_size={good}"
                )

    @property
    def width(self) -> float:
        return 1.0 if self.schedule == "full" else 0.25

    @property
    def elan_depth(self) -> int:
        return 2 if self.schedule == "full" else 1

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "schedule": self.schedule,
            "placement": self.placement.to_dict(),
            "num_categories": self.num_categories,
            "anchors": self.anchors.to_dict(),
            "swin": asdict(self.swin),
            "attention_reduction": self.attention_reduction,
            "swcsp_depth": self.swcsp_depth,
            "head_block_order": self.head_block_order,
            "bn_momentum": self.bn_momentum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {
            "input_size", "schedule", "placement", "variant", "num_categories", "anchors", "swin",
            "attention_reduction", "swcsp_depth", "head_block_order", "bn_momentum",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model fields {sorted(unknown)}")
        if "variant" in d:
            if "placement" in d:
                raise ConfigError("give either model.variant or model.placement, not both")
            d["placement"] = placement_preset(d.pop("variant"))
        elif isinstance(d.get("placement"), dict):
            d["placement"] = PlacementConfig(**d["placement"])
        elif isinstance(d.get("placement"), str):
            d["placement"] = placement_preset(d["placement"])
        if isinstance(d.get("anchors"), dict):
            d["anchors"] = AnchorSet(**d["anchors"])
        if isinstance(d.get("swin"), dict):
            d["swin"] = SwinConfig(**d["swin"])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None


class HeadBranch(nn.Module):
    """Optional SWCSP / attention, RepConv and the 1x1 prediction conv."""

    def __init__(self, c: int, cfg: ModelConfig, site: str, stride: int):
        super().__init__()
        p = cfg.placement
        blocks = []
        swin = SWCSP(c, c, cfg.swin, cfg.swcsp_depth) if site in p.swin else None
        att = attention_block(c, AttentionConfig(p.attention_kind, cfg.attention_reduction)) if site in p.attention else None
        ordered = [("swcsp", swin), ("attention", att)]
        if cfg.head_block_order == "attention_first":
            ordered.reverse()
        self.pre = nn.Sequential()
        for name, m in ordered:
            if m is not None:
                self.pre.add_module(name, m)
        # explicit graph site whose output is the RepConv input
        self.site = nn.Identity()
        self.repconv = RepConv(c, 2 * c)
        no = 3 * (5 + cfg.num_categories)
        self.predict = nn.Conv2d(2 * c, no, 1)
        self._init_bias(cfg.num_categories, stride, cfg.input_size)

    @torch.no_grad()
    def _init_bias(self, nc: int, stride: int, input_size: int):
        b = self.predict.bias.view(3, -1)
        b[:, 4] += math.log(8 / (input_size / stride) ** 2)
        b[:, 5:] += math.log(0.6 / (nc - 0.99))

    def forward(self, x):
        return self.predict(self.repconv(self.site(self.pre(x))))


class Detector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = lambda c: max(1, int(round(c * cfg.width)))  # noqa: E731
        d = cfg.elan_depth
        p = cfg.placement

        self.stem = nn.Sequential(
            CBS(3, ch(32), 3, 1), CBS(ch(32), ch(64), 3, 2), CBS(ch(64), ch(64), 3, 1), CBS(ch(64), ch(128), 3, 2)
        )
        self.stage2 = ELAN(ch(128), ch(256), ch(64), depth=d)
        self.down3 = MPDown(ch(256), ch(256))
        self.stage3 = ELAN(ch(256), ch(512), ch(128), depth=d)  # stride 8
        self.down4 = MPDown(ch(512), ch(512))
        self.stage4 = ELAN(ch(512), ch(1024), ch(256), depth=d)  # stride 16
        self.down5 = MPDown(ch(1024), ch(1024))
        self.stage5 = ELAN(ch(1024), ch(1024), ch(256), depth=d)  # stride 32

        backbone_extra = []
        if "backbone" in p.swin:
            backbone_extra.append(SWCSP(ch(1024), ch(1024), cfg.swin, cfg.swcsp_depth))
        if "backbone" in p.attention:
            backbone_extra.append(attention_block(ch(1024), AttentionConfig(p.attention_kind, cfg.attention_reduction)))
        self.backbone_extra = nn.Sequential(*backbone_extra)

        self.sppcspc = SPPCSPC(ch(1024), ch(512))
        self.up5 = UP(ch(512), ch(256))
        self.lat4 = CBS(ch(1024), ch(256), 1)
        self.td4 = ELAN(ch(512), ch(256), ch(256), ch(128), depth=d, head=True)
        self.up4 = UP(ch(256), ch(128))
        self.lat3 = CBS(ch(512), ch(128), 1)
        self.td3 = ELAN(ch(256), ch(128), ch(128), ch(64), depth=d, head=True)  # P3 out
        self.bu3 = MPDown(ch(128), ch(256))
        self.bu4_elan = ELAN(ch(512), ch(256), ch(256), ch(128), depth=d, head=True)  # P4 out
        self.bu4 = MPDown(ch(256), ch(512))
        self.bu5_elan = ELAN(ch(1024), ch(512), ch(512), ch(256), depth=d, head=True)  # P5 out

        strides = cfg.anchors.strides
        self.heads = nn.ModuleList(
            HeadBranch(c, cfg, f"head{i + 1}", s) for i, (c, s) in enumerate(zip((ch(128), ch(256), ch(512)), strides))
        )
        self.strides = strides
        for m in self.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.momentum = cfg.bn_momentum

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        s = self.cfg.input_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != s or images.shape[3] != s:
            raise ValueError(f"expected images of shape (B, 3, {s}, {s}), got {tuple(images.shape)}")
        x = self.stage2(self.stem(images))
        c3 = self.stage3(self.down3(x))
        c4 = self.stage4(self.down4(c3))
        c5 = self.backbone_extra(self.stage5(self.down5(c4)))

        p5 = self.sppcspc(c5)
        t4 = self.td4(torch.cat([self.lat4(c4), self.up5(p5)], 1))
        t3 = self.td3(torch.cat([self.lat3(c3), self.up4(t4)], 1))
        o4 = self.bu4_elan(torch.cat([self.bu3(t3), t4], 1))
        o5 = self.bu5_elan(torch.cat([self.bu4(o4), p5], 1))
        return [head(f) for head, f in zip(self.heads, (t3, o4, o5))]

    def fuse(self) -> "Detector":
        """Fold RepConv branches for inference."""
        for m in self.modules():
            if isinstance(m, RepConv) and m.fused is None:
                m.fuse()
        return self


def build(cfg: ModelConfig) -> Detector:
    return Detector(cfg)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def layer_count(model: nn.Module) -> int:
    """Number of leaf modules (a counting convention, not comparable across tools)."""
    return sum(1 for m in model.modules() if not list(m.children()))


# ------------------------------------------------------------------- decoding


def split_raw(raw: torch.Tensor, num_categories: int) -> torch.Tensor:
    """(B, 3*(5+C), H, W) -> (B, 3, H, W, 5+C)."""
    b, _, h, w = raw.shape
    return raw.view(b, 3, 5 + num_categories, h, w).permute(0, 1, 3, 4, 2)


def decode_head(raw: torch.Tensor, anchors_wh: torch.Tensor, stride: int, num_categories: int) -> torch.Tensor:
    """Decode one head to ``(B, 3, H, W, 6)``: cx, cy, w, h (pixels), confidence, category."""
    p = split_raw(raw, num_categories)
    _, _, h, w, _ = p.shape
    gy, gx = torch.meshgrid(torch.arange(h, dtype=p.dtype), torch.arange(w, dtype=p.dtype), indexing="ij")
    sig = p.sigmoid()
    cx = (sig[..., 0] * 2 - 0.5 + gx) * stride
    cy = (sig[..., 1] * 2 - 0.5 + gy) * stride
    aw = anchors_wh[:, 0].to(p.dtype).view(1, 3, 1, 1)
    ah = anchors_wh[:, 1].to(p.dtype).view(1, 3, 1, 1)
    bw = (sig[..., 2] * 2) ** 2 * aw
    bh = (sig[..., 3] * 2) ** 2 * ah
    cls_p, cls_i = sig[..., 5:].max(-1)
    conf = sig[..., 4] * cls_p
    return torch.stack([cx, cy, bw, bh, conf, cls_i.to(p.dtype)], -1)


def decode(
    raw: torch.Tensor,
    anchors: AnchorSet,
    head: int,
    input_size: int,
    conf_threshold: float = 1e-3,
    num_categories: int = 4,
) -> list[list[BoundingBox]]:
    """Per-image boxes (normalized) from one head's raw map, above ``conf_threshold``."""
    dec = decode_head(raw, anchors.tensor(head), anchors.strides[head], num_categories)
    out = []
    for img in dec:
        flat = img.reshape(-1, 6)
        flat = flat[flat[:, 4] >= conf_threshold]
        boxes = []
        for cx, cy, w, h, conf, cat in flat.tolist():
            if w <= 0 or h <= 0:
                continue
            boxes.append(BoundingBox(cx / input_size, cy / input_size, w / input_size, h / input_size, int(cat), conf))
        out.append(boxes)
    return out


def encode(box_px: Sequence[float], anchor_wh: Sequence[float], stride: int, cell: tuple[int, int]) -> list[float]:
    """Inverse of the decode transform for one box: (cx, cy, w, h) px -> (tx, ty, tw, th)."""

    def logit(p):
        return math.log(p / (1 - p))

    cx, cy, w, h = box_px
    row, col = cell
    tx = logit((cx / stride - col + 0.5) / 2)
    ty = logit((cy / stride - row + 0.5) / 2)
    tw = logit(math.sqrt(w / anchor_wh[0]) / 2)
    th = logit(math.sqrt(h / anchor_wh[1]) / 2)
    return [tx, ty, tw, th]


def postprocess(
    raws: Sequence[torch.Tensor],
    anchors: AnchorSet,
    input_size: int,
    num_categories: int,
    conf_threshold: float = 1e-3,
    iou_threshold: float = 0.65,
    max_det: int = 300,
    max_nms: int = 30000,
) -> list[list[BoundingBox]]:
    """Decode all heads, threshold, and run per-category NMS per image."""
    decoded = [
        decode_head(r.float(), anchors.tensor(h), anchors.strides[h], num_categories).flatten(1, 3)
        for h, r in enumerate(raws)
    ]
    allp = torch.cat(decoded, 1)
    results = []
    for img in allp:
        img = img[img[:, 4] >= conf_threshold]
        if len(img) == 0:
            results.append([])
            continue
        xyxy = xywh_to_xyxy(img[:, :4]).clamp(0, input_size)
        valid = ((xyxy[:, 2] - xyxy[:, 0]) > 0) & ((xyxy[:, 3] - xyxy[:, 1]) > 0)
        img, xyxy = img[valid], xyxy[valid]
        if len(img) > max_nms:
            top = img[:, 4].topk(max_nms).indices
            img, xyxy = img[top], xyxy[top]
        keep = batched_nms(xyxy, img[:, 4], img[:, 5].long(), iou_threshold)[:max_det]
        results.append(
            [
                BoundingBox.from_xyxy(*xyxy[k].tolist(), input_size, input_size, int(img[k, 5]), float(img[k, 4]))
                for k in keep.tolist()
            ]
        )
    return results


def with_placement(cfg: ModelConfig, placement: PlacementConfig) -> ModelConfig:
    return replace(cfg, placement=placement)


# ------------------------------------------------------------------ profiling


def count_macs(model: nn.Module, input_size: int, batch: int = 1) -> int:
    """Multiply-accumulates of one forward pass, counted from the executed graph.

    Convolutions, linear layers and the two attention matmuls are counted;
    elementwise ops, norms and pooling are ignored.
    """
    from .blocks import WindowAttention

    total = 0

    def conv_hook(m, inp, out):
        nonlocal total
        total += out.numel() * (m.in_channels // m.groups) * m.kernel_size[0] * m.kernel_size[1]

    def linear_hook(m, inp, out):
        nonlocal total
        total += out.numel() * m.in_features

    def attn_hook(m, inp, out):
        nonlocal total
        b, n, c = inp[0].shape
        total += 2 * b * n * n * c

    handles = []
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
        elif isinstance(m, WindowAttention):
            handles.append(m.register_forward_hook(attn_hook))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(batch, 3, input_size, input_size))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return total


def gflops(model: nn.Module, input_size: int) -> float:
    """Forward GFLOPs at batch 1, counting one multiply-accumulate as two FLOPs."""
    return 2 * count_macs(model, input_size) / 1e9


def graph_dump(model: nn.Module, input_size: int) -> list[dict]:
    """Leaf-module list with output shapes and parameter counts, in execution order."""
    rows = []
    handles = []

    def make_hook(name):
        def hook(m, inp, out):
            shape = list(out.shape) if isinstance(out, torch.Tensor) else None
            rows.append(
                {"name": name, "type": type(m).__name__, "out_shape": shape,
                 "params": sum(p.numel() for p in m.parameters(recurse=False))}
            )

        return hook

    for name, m in model.named_modules():
        if not list(m.children()):
            handles.append(m.register_forward_hook(make_hook(name)))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(1, 3, input_size, input_size))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    # modules with own parameters but no leaf hook (e.g. relative bias tables) are listed too
    seen = {r["name"] for r in rows}
    for name, m in model.named_modules():
        own = sum(p.numel() for p in m.parameters(recurse=False))
        if own and name not in seen:
            rows.append({"name": name, "type": type(m).__name__, "out_shape": None, "params": own})
    return rows
