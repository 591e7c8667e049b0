"""Image enhancement (CLAHE, unsharp masking) and the MIX training augmentation.

The MIX pipeline is: letterbox or mosaic canvas -> optional mixup with a
second canvas -> random rotation -> random horizontal flip. Every geometric
step maps labels through the same affine transform as the pixels.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import cv2
import numpy as np

from .data import Sample
from .geometry import BoundingBox

PAD_VALUE = 114


@dataclass(frozen=True)
class ClaheConfig:
    window_size: int = 8
    clip_limit: float = 4.0

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if self.clip_limit < 1:
            raise ValueError("clip_limit must be >= 1")


@dataclass(frozen=True)
class AugmentConfig:
    target_size: int = 640
    p_mosaic: float = 0.15
    p_mixup: float = 0.15
    rot_deg: float = 15.0
    p_hflip: float = 0.5
    seed: int = 0
    mixup_beta: float = 8.0
    min_area_frac: float = 0.1
    min_side_px: float = 2.0

    def __post_init__(self):
        for name in ("p_mosaic", "p_mixup", "p_hflip"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.target_size % 32:
            raise ValueError(f"target_size must be divisible by 32, got {self.target_size}")


# ---------------------------------------------------------------- enhancement


def _clahe_channel(gray: np.ndarray, tiles: int, clip_limit: float) -> np.ndarray:
    h, w = gray.shape
    if h < tiles or w < tiles:
        raise ValueError(f"image {h}x{w} is smaller than the {tiles}x{tiles} tile grid")
    pad_h, pad_w = -h % tiles, -w % tiles
    padded = cv2.copyMakeBorder(gray, 0, pad_h, 0, pad_w, cv2.BORDER_REFLECT_101) if pad_h or pad_w else gray
    th, tw = padded.shape[0] // tiles, padded.shape[1] // tiles
    area = th * tw

    blocks = padded.reshape(tiles, th, tiles, tw).transpose(0, 2, 1, 3).reshape(tiles * tiles, area)
    hist = np.stack([np.bincount(b, minlength=256) for b in blocks]).astype(np.int64)
    # a single-level tile has no contrast to redistribute: map it through unchanged
    flat = (hist > 0).sum(axis=1) == 1

    if np.isfinite(clip_limit):
        limit = max(int(clip_limit * area / 256), 1)
        excess = np.maximum(hist - limit, 0).sum(axis=1)
        hist = np.minimum(hist, limit)
        hist += (excess // 256)[:, None]
        residual = excess % 256
        for t, r in enumerate(residual):
            if r:
                step = max(256 // r, 1)
                hist[t, np.arange(0, 256, step)[:r]] += 1

    luts = np.clip(np.rint(np.cumsum(hist, axis=1) * (255.0 / area)), 0, 255)
    luts[flat] = np.arange(256)
    luts = luts.reshape(tiles, tiles, 256)

    # bilinear blend between the four nearest tile mappings
    ys = (np.arange(h) + 0.5) / th - 0.5
    xs = (np.arange(w) + 0.5) / tw - 0.5
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    y1 = np.clip(y0 + 1, 0, tiles - 1)
    x1 = np.clip(x0 + 1, 0, tiles - 1)
    y0 = np.clip(y0, 0, tiles - 1)
    x0 = np.clip(x0, 0, tiles - 1)
    v = gray.astype(np.intp)
    top = (1 - fx) * luts[y0[:, None], x0[None, :], v] + fx * luts[y0[:, None], x1[None, :], v]
    bottom = (1 - fx) * luts[y1[:, None], x0[None, :], v] + fx * luts[y1[:, None], x1[None, :], v]
    out = (1 - fy) * top + fy * bottom
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _on_luminance(image: np.ndarray, fn) -> np.ndarray:
    if image.ndim == 2:
        return fn(image)
    if image.ndim == 3 and image.shape[2] == 3:
        if np.array_equal(image[..., 0], image[..., 1]) and np.array_equal(image[..., 0], image[..., 2]):
            return np.repeat(fn(image[..., 0])[:, :, None], 3, axis=2)
        lab = cv2.cvtColor(image, cv2.COLOR_BGR2LAB)
        lab[..., 0] = fn(lab[..., 0])
        return cv2.cvtColor(lab, cv2.COLOR_LAB2BGR)
    raise ValueError(f"expected HxW or HxWx3 image, got shape {image.shape}")


def clahe(image: np.ndarray, cfg: ClaheConfig = ClaheConfig()) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on a ``window_size``
    square tile grid. ``clip_limit`` is relative to the uniform bin height;
    ``float('inf')`` disables clipping. 3-channel images are processed on
    luminance."""
    if image.dtype != np.uint8:
        raise TypeError("clahe expects a uint8 image")
    return _on_luminance(image, lambda g: _clahe_channel(g, cfg.window_size, cfg.clip_limit))


def unsharp_mask(image: np.ndarray, filter: str = "gaussian", amount: float = 1.0, kernel: int = 5) -> np.ndarray:
    """``image + amount * (image - smooth(image))`` clamped to uint8."""
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 3, got {kernel}")
    if filter == "median":
        smooth = cv2.medianBlur(image, kernel)
    elif filter == "gaussian":
        smooth = cv2.GaussianBlur(image, (kernel, kernel), 0)
    else:
        raise ValueError(f"filter must be 'median' or 'gaussian', got {filter!r}")
    img = image.astype(np.float64)
    out = img + amount * (img - smooth.astype(np.float64))
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


PREPROCESS_METHODS = ("none", "clahe", "um_median", "um_gaussian")


def enhance(image: np.ndarray, method: str, clahe_cfg: ClaheConfig = ClaheConfig(), amount=1.0, kernel=5):
    """Apply one of the offline enhancement methods by name."""
    if method == "none":
        return image
    if method == "clahe":
        return clahe(image, clahe_cfg)
    if method == "um_median":
        return unsharp_mask(image, "median", amount, kernel)
    if method == "um_gaussian":
        return unsharp_mask(image, "gaussian", amount, kernel)
    raise ValueError(f"unknown preprocessing method {method!r}; choose from {PREPROCESS_METHODS}")


# --------------------------------------------------------------- augmentation


def sample_seed(global_seed: int, image_id: str, epoch: int) -> int:
    """Stable per-sample seed, independent of worker count and process."""
    digest = hashlib.sha256(f"{global_seed}:{image_id}:{epoch}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _as_bgr(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return np.repeat(image[:, :, None], 3, axis=2)
    return image


def _boxes_xyxy(boxes: Sequence[BoundingBox], w: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    if not boxes:
        return np.zeros((0, 4)), np.zeros(0, dtype=int)
    xyxy = np.array([b.to_xyxy(w, h) for b in boxes], dtype=np.float64)
    return xyxy, np.array([b.category_id for b in boxes], dtype=int)


def _affine_boxes(xyxy: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Axis-aligned hull of the four corners of each box under a 2x3 affine."""
    if len(xyxy) == 0:
        return xyxy
    x1, y1, x2, y2 = xyxy.T
    corners = np.stack([np.stack([x1, y1]), np.stack([x2, y1]), np.stack([x1, y2]), np.stack([x2, y2])], axis=0)
    # corners: (4, 2, N)
    tx = m[0, 0] * corners[:, 0] + m[0, 1] * corners[:, 1] + m[0, 2]
    ty = m[1, 0] * corners[:, 0] + m[1, 1] * corners[:, 1] + m[1, 2]
    return np.stack([tx.min(0), ty.min(0), tx.max(0), ty.max(0)], axis=1)


class _Canvas:
    """Square BGR canvas plus absolute corner-format labels."""

    def __init__(self, image: np.ndarray, xyxy: np.ndarray, cats: np.ndarray):
        self.image = image
        self.xyxy = xyxy
        self.cats = cats

    def transform(self, m: np.ndarray, cfg: AugmentConfig) -> "_Canvas":
        size = self.image.shape[0]
        image = cv2.warpAffine(
            self.image, m, (size, size), flags=cv2.INTER_LINEAR, borderValue=(PAD_VALUE,) * 3
        )
        hull = _affine_boxes(self.xyxy, m)
        clipped = np.clip(hull, 0, size)
        keep = _retained(hull, clipped, cfg)
        return _Canvas(image, clipped[keep], self.cats[keep])


def _retained(before: np.ndarray, after: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    if len(before) == 0:
        return np.zeros(0, dtype=bool)
    wb, hb = before[:, 2] - before[:, 0], before[:, 3] - before[:, 1]
    wa, ha = after[:, 2] - after[:, 0], after[:, 3] - after[:, 1]
    area_ok = wa * ha >= cfg.min_area_frac * wb * hb
    return area_ok & (wa >= cfg.min_side_px) & (ha >= cfg.min_side_px)


def letterbox(sample: Sample, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, tuple[float, float, float]]:
    """Resize keeping aspect ratio and pad to ``size`` square.

    Returns image, absolute corner boxes, categories and ``(gain, pad_x, pad_y)``.
    """
    image = _as_bgr(sample.image)
    h, w = image.shape[:2]
    gain = size / max(h, w)
    nw, nh = max(1, round(w * gain)), max(1, round(h * gain))
    resized = cv2.resize(image, (nw, nh), interpolation=cv2.INTER_LINEAR) if (nw, nh) != (w, h) else image
    px, py = (size - nw) // 2, (size - nh) // 2
    canvas = np.full((size, size, 3), PAD_VALUE, dtype=np.uint8)
    canvas[py : py + nh, px : px + nw] = resized
    xyxy, cats = _boxes_xyxy(sample.boxes, w, h)
    sx, sy = nw / w, nh / h
    if len(xyxy):
        xyxy = xyxy * np.array([sx, sy, sx, sy]) + np.array([px, py, px, py])
    return canvas, xyxy, cats, (gain, px, py)


def _letterbox_canvas(sample: Sample, size: int) -> _Canvas:
    image, xyxy, cats, _ = letterbox(sample, size)
    return _Canvas(image, xyxy, cats)


def _mosaic_canvas(samples: Sequence[Sample], size: int, rng: np.random.Generator) -> _Canvas:
    """Tile four samples around a random center; each fits its quadrant."""
    xc = int(rng.uniform(0.25 * size, 0.75 * size))
    yc = int(rng.uniform(0.25 * size, 0.75 * size))
    canvas = np.full((size, size, 3), PAD_VALUE, dtype=np.uint8)
    quads = [(0, 0, xc, yc), (xc, 0, size, yc), (0, yc, xc, size), (xc, yc, size, size)]
    all_xyxy, all_cats = [], []
    for k, (sample, (qx1, qy1, qx2, qy2)) in enumerate(zip(samples, quads)):
        image = _as_bgr(sample.image)
        h, w = image.shape[:2]
        qw, qh = qx2 - qx1, qy2 - qy1
        scale = min(qw / w, qh / h)
        nw, nh = max(1, min(qw, round(w * scale))), max(1, min(qh, round(h * scale)))
        resized = cv2.resize(image, (nw, nh), interpolation=cv2.INTER_LINEAR)
        # hug the mosaic center
        ox = qx2 - nw if k in (0, 2) else qx1
        oy = qy2 - nh if k in (0, 1) else qy1
        canvas[oy : oy + nh, ox : ox + nw] = resized
        xyxy, cats = _boxes_xyxy(sample.boxes, w, h)
        if len(xyxy):
            sx, sy = nw / w, nh / h
            all_xyxy.append(xyxy * np.array([sx, sy, sx, sy]) + np.array([ox, oy, ox, oy]))
            all_cats.append(cats)
    xyxy = np.concatenate(all_xyxy) if all_xyxy else np.zeros((0, 4))
    cats = np.concatenate(all_cats) if all_cats else np.zeros(0, dtype=int)
    return _Canvas(canvas, xyxy, cats)


def _build_canvas(primary: Sample, pool, cfg: AugmentConfig, rng: np.random.Generator) -> _Canvas:
    if cfg.p_mosaic > 0 and len(pool) > 0 and rng.random() < cfg.p_mosaic:
        extra = [pool[int(i)] for i in rng.integers(0, len(pool), size=3)]
        return _mosaic_canvas([primary, *extra], cfg.target_size, rng)
    return _letterbox_canvas(primary, cfg.target_size)


def mix_augment(primary: Sample, pool, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Produce one augmented ``target_size`` square training sample.

    ``pool`` is any indexable sample source used for mosaic/mixup partners.
    """
    size = cfg.target_size
    canvas = _build_canvas(primary, pool, cfg, rng)

    if cfg.p_mixup > 0 and len(pool) > 0 and rng.random() < cfg.p_mixup:
        other = _build_canvas(pool[int(rng.integers(0, len(pool)))], pool, cfg, rng)
        r = rng.beta(cfg.mixup_beta, cfg.mixup_beta)
        blended = canvas.image.astype(np.float64) * r + other.image.astype(np.float64) * (1 - r)
        canvas = _Canvas(
            np.clip(np.rint(blended), 0, 255).astype(np.uint8),
            np.concatenate([canvas.xyxy, other.xyxy]),
            np.concatenate([canvas.cats, other.cats]),
        )

    if cfg.rot_deg > 0:
        angle = rng.uniform(-cfg.rot_deg, cfg.rot_deg)
        m = cv2.getRotationMatrix2D((size / 2, size / 2), angle, 1.0)
        canvas = canvas.transform(m, cfg)

    if cfg.p_hflip > 0 and rng.random() < cfg.p_hflip:
        image = np.ascontiguousarray(canvas.image[:, ::-1])
        xyxy = canvas.xyxy.copy()
        if len(xyxy):
            xyxy[:, [0, 2]] = size - canvas.xyxy[:, [2, 0]]
        canvas = _Canvas(image, xyxy, canvas.cats)

    clipped = np.clip(canvas.xyxy, 0, size)
    keep = _retained(canvas.xyxy, clipped, cfg)
    boxes = [
        BoundingBox.from_xyxy(*xy, width=size, height=size, category_id=int(c))
        for xy, c in zip(clipped[keep], canvas.cats[keep])
    ]
    return Sample(primary.image_id, canvas.image, boxes)


def plain_resize(sample: Sample, size: int) -> Sample:
    """Letterbox only; used for evaluation and prediction."""
    image, xyxy, cats, _ = letterbox(sample, size)
    boxes = [BoundingBox.from_xyxy(*xy, width=size, height=size, category_id=int(c)) for xy, c in zip(xyxy, cats)]
    return Sample(sample.image_id, image, boxes)
