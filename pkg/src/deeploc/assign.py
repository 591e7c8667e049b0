"""Anchor table and static Center-Prior assignment of targets to candidates."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch

from .geometry import BoundingBox

log = logging.getLogger(__name__)

# pixel (width, height) per scale, strides 8 / 16 / 32
DEFAULT_ANCHORS = (
    ((12, 16), (19, 36), (40, 28)),
    ((36, 75), (76, 55), (72, 146)),
    ((142, 110), (192, 243), (459, 401)),
)
DEFAULT_STRIDES = (8, 16, 32)


@dataclass(frozen=True)
class AnchorSet:
    anchors: tuple = DEFAULT_ANCHORS
    strides: tuple = DEFAULT_STRIDES

    def __post_init__(self):
        anchors = tuple(tuple(tuple(float(v) for v in wh) for wh in scale) for scale in self.anchors)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.anchors) != len(self.strides):
            raise ValueError("one anchor triple per stride is required")
        for scale in self.anchors:
            if len(scale) != 3:
                raise ValueError(f"exactly 3 anchors per scale are required, got {len(scale)}")
            if any(v <= 0 for wh in scale for v in wh):
                raise ValueError("anchor sizes must be positive")

    @property
    def num_heads(self) -> int:
        return len(self.strides)

    @property
    def num_anchors(self) -> int:
        return 3

    def tensor(self, head: int, dtype=torch.float32) -> torch.Tensor:
        """``(3, 2)`` anchor sizes in pixels for one head."""
        return torch.tensor(self.anchors[head], dtype=dtype)

    def to_dict(self) -> dict:
        return {"anchors": [[list(wh) for wh in s] for s in self.anchors], "strides": list(self.strides)}


class AssignmentEntry(NamedTuple):
    head: int
    cell_y: int
    cell_x: int
    anchor: int
    target: int


def anchor_ratio(wh_target: tuple[float, float], wh_anchor: tuple[float, float]) -> float:
    """Worst-axis size mismatch ``max(w/wa, wa/w, h/ha, ha/h)``."""
    (w, h), (wa, ha) = wh_target, wh_anchor
    return max(w / wa, wa / w, h / ha, ha / h)


def size_predicate(box: BoundingBox, anchor_wh, input_size: int, ratio_threshold: float = 4.0) -> bool:
    return anchor_ratio((box.w * input_size, box.h * input_size), anchor_wh) < ratio_threshold


def containing_cell(box: BoundingBox, grid: int) -> tuple[int, int]:
    """(row, col) of the cell holding the box center."""
    return min(int(math.floor(box.cy * grid)), grid - 1), min(int(math.floor(box.cx * grid)), grid - 1)


def center_predicate(box: BoundingBox, cell_y: int, cell_x: int, grid: int, center_radius: float = 0.5) -> bool:
    """True for the containing cell and for 4-neighbours of it whose centre
    lies within ``0.5 + center_radius`` cells of the target centre along the
    shared axis."""
    row, col = containing_cell(box, grid)
    gx, gy = box.cx * grid, box.cy * grid
    if (cell_y, cell_x) == (row, col):
        return True
    reach = 0.5 + center_radius
    if cell_y == row and abs(cell_x - col) == 1:
        return abs(gx - (cell_x + 0.5)) < reach
    if cell_x == col and abs(cell_y - row) == 1:
        return abs(gy - (cell_y + 0.5)) < reach
    return False


def assign(
    targets: Sequence[BoundingBox],
    anchors: AnchorSet = AnchorSet(),
    input_size: int = 640,
    ratio_threshold: float = 4.0,
    center_radius: float = 0.5,
) -> list[AssignmentEntry]:
    """Center-Prior candidates for one image.

    Entries are ordered by head, target, anchor, then cell offset.
    """
    entries: list[AssignmentEntry] = []
    reach = 0.5 + center_radius
    for h, stride in enumerate(anchors.strides):
        grid = input_size // stride
        for t, box in enumerate(targets):
            eligible = [
                a for a, wh in enumerate(anchors.anchors[h]) if size_predicate(box, wh, input_size, ratio_threshold)
            ]
            if not eligible:
                continue
            row, col = containing_cell(box, grid)
            gx, gy = box.cx * grid, box.cy * grid
            cells = [(row, col)]
            for dc in (-1, 1):
                c = col + dc
                if 0 <= c < grid and abs(gx - (c + 0.5)) < reach:
                    cells.append((row, c))
            for dr in (-1, 1):
                r = row + dr
                if 0 <= r < grid and abs(gy - (r + 0.5)) < reach:
                    cells.append((r, col))
            for a in eligible:
                entries.extend(AssignmentEntry(h, cy, cx, a, t) for cy, cx in cells)
    if targets and not entries:
        log.debug("no anchor candidates for %d targets", len(targets))
    return entries


def assign_batch(
    targets: torch.Tensor,
    anchors: AnchorSet,
    input_size: int,
    ratio_threshold: float = 4.0,
    center_radius: float = 0.5,
) -> torch.Tensor:
    """Vectorised :func:`assign` over a batch.

    ``targets`` is ``(T, 6)``: image, category, cx, cy, w, h (normalized).
    Returns ``(K, 6)`` long rows: image, head, anchor, cell_y, cell_x, target_row.
    """
    rows = []
    device = targets.device
    tidx = torch.arange(len(targets), device=device)
    reach = 0.5 + center_radius
    for h, stride in enumerate(anchors.strides):
        grid = input_size // stride
        if len(targets) == 0:
            continue
        wh = targets[:, 4:6].double() * input_size
        anc = anchors.tensor(h, torch.float64).to(device)
        r = wh[:, None, :] / anc[None]
        ok = torch.maximum(r, 1 / r).amax(-1) < ratio_threshold  # (T, 3)
        t_i, a_i = ok.nonzero(as_tuple=True)
        if len(t_i) == 0:
            continue
        g = targets[t_i, 2:4].double() * grid
        cell = g.floor().long().clamp(max=grid - 1)
        col, row = cell[:, 0], cell[:, 1]
        cands = [(row, col, torch.ones_like(col, dtype=torch.bool))]
        for dc in (-1, 1):
            c = col + dc
            cands.append((row, c, (c >= 0) & (c < grid) & ((g[:, 0] - (c + 0.5)).abs() < reach)))
        for dr in (-1, 1):
            rr = row + dr
            cands.append((rr, col, (rr >= 0) & (rr < grid) & ((g[:, 1] - (rr + 0.5)).abs() < reach)))
        for cy, cx, valid in cands:
            sel = valid.nonzero(as_tuple=True)[0]
            tt = tidx[t_i[sel]]
            rows.append(
                torch.stack(
                    [targets[tt, 0].long(), torch.full_like(tt, h), a_i[sel], cy[sel], cx[sel], tt], dim=1
                )
            )
    if not rows:
        return torch.zeros((0, 6), dtype=torch.long, device=device)
    return torch.cat(rows)
