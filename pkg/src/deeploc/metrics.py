"""Detection metrics: greedy matching, all-points AP, P/R/F1 and PR curves."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .geometry import BoundingBox, box_iou

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))


def match_detections(
    dets: Mapping[str, Sequence[BoundingBox]],
    gts: Mapping[str, Sequence[BoundingBox]],
    category: int,
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
):
    """Greedy confidence-ordered matching for one category.

    Returns ``(confidences, tp, n_gt)`` with ``tp`` of shape
    ``(n_dets, len(iou_thresholds))``, rows in descending-confidence order.
    Ties in confidence are broken by image id then box coordinates so the
    result does not depend on input order.
    """
    rows = []
    for image_id, boxes in dets.items():
        for b in boxes:
            if b.category_id == category:
                rows.append((-(b.confidence or 0.0), image_id, b.to_xyxy(), b))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))

    gt_boxes = {
        k: torch.tensor([g.to_xyxy() for g in v if g.category_id == category], dtype=torch.float64).reshape(-1, 4)
        for k, v in gts.items()
    }
    n_gt = sum(len(v) for v in gt_boxes.values())
    thresholds = np.asarray(iou_thresholds, dtype=np.float64)
    tp = np.zeros((len(rows), len(thresholds)), dtype=bool)
    taken = {k: np.zeros((len(v), len(thresholds)), dtype=bool) for k, v in gt_boxes.items()}

    for i, (_, image_id, xyxy, _) in enumerate(rows):
        g = gt_boxes.get(image_id)
        if g is None or len(g) == 0:
            continue
        ious = box_iou(torch.tensor([xyxy], dtype=torch.float64), g)[0].numpy()
        for k, thr in enumerate(thresholds):
            free = ~taken[image_id][:, k] & (ious >= thr - 1e-12)
            if free.any():
                j = int(np.argmax(np.where(free, ious, -1.0)))
                taken[image_id][j, k] = True
                tp[i, k] = True
    conf = np.array([-r[0] for r in rows], dtype=np.float64)
    return conf, tp, n_gt


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-points interpolated area under the PR curve."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([1.0], precision, [0.0]))
    mpre = np.flip(np.maximum.accumulate(np.flip(mpre)))
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


@dataclass
class CategoryMetrics:
    name: str
    labels: int
    precision: float
    recall: float
    f1: float
    ap50: float
    ap50_95: float
    pr_recall: list = field(default_factory=list)
    pr_precision: list = field(default_factory=list)


@dataclass
class EvalReport:
    categories: list
    precision: float
    recall: float
    f1: float
    map50: float
    map50_95: float
    labels: int
    operating_confidence: float

    def row(self) -> dict:
        out = {
            "P": self.precision,
            "R": self.recall,
            "F1": self.f1,
            "mAP50": self.map50,
            "mAP50-95": self.map50_95,
            "labels": self.labels,
        }
        for c in self.categories:
            out[f"AP50_{c.name}"] = c.ap50
        return out

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "all": {k: clean(v) for k, v in self.row().items() if not k.startswith("AP50_")},
            "operating_confidence": self.operating_confidence,
            "categories": [
                {k: clean(v) for k, v in c.__dict__.items() if not k.startswith("pr_")} for c in self.categories
            ],
        }

    def save(self, directory: str | Path, plot: bool = True) -> None:
        """Write ``report.json``, ``report.csv``, PR-curve CSVs and (optionally) a PNG."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(json.dumps(self.to_dict(), indent=2))
        with open(directory / "report.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["class", "labels", "P", "R", "F1", "mAP@.5", "mAP@.5-.95"])
            writer.writerow(["all", self.labels, self.precision, self.recall, self.f1, self.map50, self.map50_95])
            for c in self.categories:
                writer.writerow([c.name, c.labels, c.precision, c.recall, c.f1, c.ap50, c.ap50_95])
        for c in self.categories:
            with open(directory / f"pr_{c.name}.csv", "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["recall", "precision"])
                writer.writerows(zip(c.pr_recall, c.pr_precision))
        if plot:
            self.plot_pr(directory / "pr_curve.png")

    def plot_pr(self, path: str | Path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 5), dpi=120)
        for c in self.categories:
            if c.labels:
                ax.plot(c.pr_recall, c.pr_precision, label=f"{c.name} {c.ap50:.3f}")
        ax.set_xlabel("Recall")
        ax.set_ylabel("Precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_title(f"all classes {self.map50:.3f} mAP@0.5")
        ax.legend(loc="lower left", fontsize=8)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def evaluate_detections(
    dets: Mapping[str, Sequence[BoundingBox]],
    gts: Mapping[str, Sequence[BoundingBox]],
    category_names: Sequence[str],
) -> EvalReport:
    """Score detections against ground truth keyed by image id.

    Categories without labels are reported with NaN metrics and excluded from
    the overall means.
    """
    if not gts:
        raise ValueError("cannot evaluate an empty split")
    grid = np.linspace(0, 1, 1000)
    per_cat = []
    curves_p, curves_r = [], []
    for c, name in enumerate(category_names):
        conf, tp, n_gt = match_detections(dets, gts, c)
        if n_gt == 0:
            per_cat.append(None)
            continue
        tpc = np.cumsum(tp, 0)
        fpc = np.cumsum(~tp, 0)
        recall = tpc / n_gt
        precision = tpc / np.maximum(tpc + fpc, 1)
        aps = [average_precision(recall[:, k], precision[:, k]) if len(conf) else 0.0 for k in range(tp.shape[1])]
        if len(conf):
            # P and R as functions of the confidence cut-off (conf is descending)
            r_at = np.interp(-grid, -conf, recall[:, 0], left=0)
            p_at = np.interp(-grid, -conf, precision[:, 0], left=1)
            mrec = np.concatenate(([0.0], recall[:, 0], [1.0]))
            mpre = np.flip(np.maximum.accumulate(np.flip(np.concatenate(([1.0], precision[:, 0], [0.0])))))
        else:
            r_at, p_at = np.zeros_like(grid), np.zeros_like(grid)
            mrec, mpre = np.array([0.0, 1.0]), np.array([0.0, 0.0])
        curves_r.append(r_at)
        curves_p.append(p_at)
        per_cat.append((name, n_gt, aps, mrec, mpre, len(curves_r) - 1))

    if not curves_r:
        raise ValueError("split has no ground-truth boxes")
    pr = np.stack(curves_p)
    rr = np.stack(curves_r)
    f1 = 2 * pr * rr / np.maximum(pr + rr, 1e-16)
    best = int(f1.mean(0).argmax())

    cats = []
    for c, name in enumerate(category_names):
        entry = per_cat[c]
        if entry is None:
            nan = float("nan")
            cats.append(CategoryMetrics(name, 0, nan, nan, nan, nan, nan))
            continue
        _, n_gt, aps, mrec, mpre, k = entry
        p, r = float(pr[k, best]), float(rr[k, best])
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        cats.append(
            CategoryMetrics(name, n_gt, p, r, f, aps[0], float(np.mean(aps)), mrec.tolist(), mpre.tolist())
        )

    present = [c for c in cats if c.labels]
    return EvalReport(
        categories=cats,
        precision=float(np.mean([c.precision for c in present])),
        recall=float(np.mean([c.recall for c in present])),
        f1=float(np.mean([c.f1 for c in present])),
        map50=float(np.mean([c.ap50 for c in present])),
        map50_95=float(np.mean([c.ap50_95 for c in present])),
        labels=sum(c.labels for c in present),
        operating_confidence=float(grid[best]),
    )
