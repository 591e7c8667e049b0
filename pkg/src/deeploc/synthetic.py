"""Synthetic rectangle datasets whose labels are exact by construction."""

from __future__ import annotations

import numpy as np

from .data import Sample
from .geometry import BoundingBox

# one gray level per category so the class is recoverable from pixels alone
CATEGORY_LEVELS = (70, 130, 190, 250)


def rectangle_sample(
    rng: np.random.Generator,
    image_id: str,
    size: int = 224,
    max_boxes: int = 3,
    num_categories: int = 4,
    min_side: int = 16,
    max_side: int = 96,
) -> Sample:
    """One grayscale-on-black image holding non-overlapping solid rectangles."""
    image = np.full((size, size), 20, dtype=np.uint8)
    boxes: list[BoundingBox] = []
    placed: list[tuple[int, int, int, int]] = []
    n = int(rng.integers(1, max_boxes + 1))
    for _ in range(50 * n):
        if len(boxes) == n:
            break
        w, h = (int(v) for v in rng.integers(min_side, max_side + 1, size=2))
        x1 = int(rng.integers(0, size - w + 1))
        y1 = int(rng.integers(0, size - h + 1))
        x2, y2 = x1 + w, y1 + h
        # keep a 4px gap so rectangles never touch
        if any(x1 < b[2] + 4 and b[0] < x2 + 4 and y1 < b[3] + 4 and b[1] < y2 + 4 for b in placed):
            continue
        cat = int(rng.integers(0, num_categories))
        image[y1:y2, x1:x2] = CATEGORY_LEVELS[cat % len(CATEGORY_LEVELS)]
        placed.append((x1, y1, x2, y2))
        boxes.append(BoundingBox.from_xyxy(x1, y1, x2, y2, size, size, category_id=cat))
    return Sample(image_id, np.repeat(image[:, :, None], 3, axis=2), boxes)


def rectangle_dataset(n: int, size: int = 224, seed: int = 0, **kwargs) -> list[Sample]:
    rng = np.random.default_rng(seed)
    return [rectangle_sample(rng, f"synth_{i:04d}", size=size, **kwargs) for i in range(n)]
