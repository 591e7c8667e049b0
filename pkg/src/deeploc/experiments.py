"""Placement-variant comparison: train/evaluate each variant, profile size and speed."""

from __future__ import annotations

import csv
import logging
import time
import traceback
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import torch

from .data import MERGED_NAMES
from .model import Detector, PlacementConfig, VARIANTS, build, gflops, layer_count, parameter_count, postprocess
from .preprocess import plain_resize
from .train import TrainConfig, collate, evaluate, seed_everything, train

log = logging.getLogger(__name__)

BASE_COLUMNS = ["variant", "params_M", "gflops", "layers", "time_single_ms", "time_batch_ms", "P", "R", "F1",
                "mAP50", "mAP50-95"]


def _variant_name(v) -> str:
    if isinstance(v, str):
        return v
    for name, preset in VARIANTS.items():
        if preset == v:
            return name
    return f"custom({','.join(sorted(v.swin))}|{v.attention_kind}:{','.join(sorted(v.attention))})"


@torch.no_grad()
def time_inference(model: Detector, samples: Sequence, repeats: int = 3) -> tuple[float, float]:
    """Seconds per image for one-at-a-time and whole-batch inference.

    Both timings cover letterboxing, tensor conversion, the forward pass and
    NMS. The best of ``repeats`` passes is kept after one warm-up pass.
    """
    model.eval()
    cfg = model.cfg

    def run(batch):
        images, _, _ = collate([plain_resize(s, cfg.input_size) for s in batch])
        postprocess(model(images), cfg.anchors, cfg.input_size, cfg.num_categories)

    run(samples[:1])
    single, batched = float("inf"), float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        for s in samples:
            run([s])
        single = min(single, (time.perf_counter() - t) / len(samples))
        t = time.perf_counter()
        run(list(samples))
        batched = min(batched, (time.perf_counter() - t) / len(samples))
    return single, batched


def run_matrix(
    variants: Sequence[str | PlacementConfig],
    model_cfg,
    train_cfg: TrainConfig | None,
    splits: dict,
    out_dir: str | Path,
    loss_cfg=None,
    aug_cfg=None,
    profile_size: int | None = None,
    timing_images: int = 8,
) -> list[dict]:
    """One row per variant; a failing variant yields a row with an ``error`` entry.

    ``train_cfg=None`` evaluates freshly initialised weights (structural runs).
    """
    if not variants:
        raise ValueError("run_matrix needs at least one variant")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = MERGED_NAMES[: model_cfg.num_categories]
    rows = []
    for v in variants:
        name = _variant_name(v)
        row: dict = {"variant": name}
        try:
            placement = VARIANTS[v] if isinstance(v, str) else v
            if isinstance(v, str) and v not in VARIANTS:
                raise KeyError(f"unknown variant {v!r}")
            mcfg = replace(model_cfg, placement=placement)
            seed_everything(train_cfg.seed if train_cfg else 0)
            model = build(mcfg)
            row["params_M"] = parameter_count(model) / 1e6
            row["gflops"] = gflops(model, profile_size or mcfg.input_size)
            row["layers"] = layer_count(model)
            if train_cfg is not None:
                kwargs = {"val_source": splits.get("val")}
                if loss_cfg is not None:
                    kwargs["loss_cfg"] = loss_cfg
                if aug_cfg is not None:
                    kwargs["aug"] = replace(aug_cfg, target_size=mcfg.input_size)
                train(model, splits["train"], train_cfg, out_dir / name, **kwargs)
            report = evaluate(model, splits.get("test") or splits["val"], train_cfg.conf_threshold if train_cfg else 1e-3)
            report.save(out_dir / name / "eval")
            r = report.row()
            row.update({k: r[k] for k in ("P", "R", "F1", "mAP50", "mAP50-95")})
            for c in report.categories:
                row[f"AP50_{c.name}"] = c.ap50
            src = splits.get("test") or splits["val"]
            samples = [src[i % len(src)] for i in range(timing_images)]
            single, batched = time_inference(model, samples)
            row["time_single_ms"] = 1000 * single
            row["time_batch_ms"] = 1000 * batched
        except Exception as e:  # noqa: BLE001 - the matrix records and moves on
            log.error("variant %s failed: %s", name, e)
            row["error"] = f"{type(e).__name__}: {e}"
            (out_dir / f"{name}.error.txt").write_text(traceback.format_exc())
        rows.append(row)
    write_matrix_csv(rows, out_dir / "matrix.csv", names)
    return rows


def write_matrix_csv(rows: list[dict], path: str | Path, category_names: Sequence[str]) -> None:
    columns = BASE_COLUMNS + [f"AP50_{n}" for n in category_names] + ["error"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({c: r.get(c, "") for c in columns})
