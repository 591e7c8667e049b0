"""Training loop, inference-mode evaluation and checkpoint I/O."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
from torch.utils.data import DataLoader, Dataset

from .assign import assign_batch
from .data import MERGED_NAMES, Sample
from .loss import LossConfig, deeploc_loss
from .metrics import EvalReport, evaluate_detections
from .model import Detector, ModelConfig, build, postprocess
from .preprocess import AugmentConfig, mix_augment, plain_resize, sample_seed

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-2
    final_lr: float = 1e-3
    weight_decay: float = 5e-4
    momentum: float = 0.937
    optimizer: str = "sgd"
    warmup_epochs: float = 3.0
    conf_threshold: float = 1e-3
    nms_iou: float = 0.65
    seed: int = 0
    workers: int = 0
    augment: bool = True
    val_every: int = 1
    save_every: int = 0
    ema: bool = False
    ema_decay: float = 0.9999
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0 or self.weight_decay < 0 or self.momentum < 0:
            raise ValueError("lr, weight_decay and momentum must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


# -------------------------------------------------------------------- batching


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """HxWx3 BGR uint8 -> 3xHxW RGB float in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(image[:, :, ::-1].transpose(2, 0, 1))).float() / 255.0


def collate(samples: Sequence[Sample]):
    images = torch.stack([to_tensor(s.image) for s in samples])
    rows = [[i, b.category_id, b.cx, b.cy, b.w, b.h] for i, s in enumerate(samples) for b in s.boxes]
    targets = torch.tensor(rows, dtype=torch.float32).reshape(-1, 6)
    return images, targets, [s.image_id for s in samples]


class AugmentedSource(Dataset):
    """Per-sample deterministic MIX augmentation keyed on (seed, image_id, epoch)."""

    def __init__(self, source, aug: AugmentConfig, augment: bool = True):
        self.source = source
        self.aug = aug
        self.augment = augment
        self.epoch = 0

    def __len__(self):
        return len(self.source)

    def __getitem__(self, i):
        sample = self.source[i]
        if not self.augment:
            return plain_resize(sample, self.aug.target_size)
        rng = np.random.default_rng(sample_seed(self.aug.seed, sample.image_id, self.epoch))
        return mix_augment(sample, self.source, self.aug, rng)


# ------------------------------------------------------------------ evaluation


@torch.no_grad()
def predict(model: Detector, images: torch.Tensor, conf_threshold=1e-3, iou_threshold=0.65):
    model.eval()
    cfg = model.cfg
    raws = model(images)
    return postprocess(raws, cfg.anchors, cfg.input_size, cfg.num_categories, conf_threshold, iou_threshold)


def evaluate(
    model: Detector,
    source,
    conf_threshold: float = 1e-3,
    iou_threshold: float = 0.65,
    batch_size: int = 8,
    category_names: Sequence[str] = MERGED_NAMES,
) -> EvalReport:
    """Letterbox every sample, run inference, NMS and score against its labels."""
    if len(source) == 0:
        raise ValueError("cannot evaluate an empty split")
    was_training = model.training
    size = model.cfg.input_size
    dets, gts = {}, {}
    for start in range(0, len(source), batch_size):
        batch = [plain_resize(source[i], size) for i in range(start, min(start + batch_size, len(source)))]
        images, _, ids = collate(batch)
        for s, d in zip(batch, predict(model, images, conf_threshold, iou_threshold)):
            dets[s.image_id] = d
            gts[s.image_id] = s.boxes
    model.train(was_training)
    return evaluate_detections(dets, gts, category_names[: model.cfg.num_categories])


# ------------------------------------------------------------------ checkpoint


def fingerprint(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, model: nn.Module, optimizer, epoch: int, run_config: dict, metrics: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "epoch": epoch,
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "model_config": model.cfg.to_dict(),
            "config": run_config,
            "fingerprint": fingerprint(run_config),
            "metrics": metrics or {},
        },
        path,
    )


def load_checkpoint(path) -> tuple[Detector, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    model = build(ModelConfig.from_dict(ckpt["model_config"]))
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, ckpt


# -------------------------------------------------------------------- training


class ModelEMA:
    def __init__(self, model: nn.Module, decay: float):
        self.ema = copy.deepcopy(model).eval()
        self.decay = decay
        self.updates = 0
        for p in self.ema.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def update(self, model: nn.Module):
        self.updates += 1
        d = self.decay * (1 - math.exp(-self.updates / 2000))
        msd = model.state_dict()
        for k, v in self.ema.state_dict().items():
            if v.dtype.is_floating_point:
                v.mul_(d).add_(msd[k].detach(), alpha=1 - d)


def make_optimizer(model: nn.Module, cfg: TrainConfig):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (decay if p.ndim > 1 and "rel_bias_table" not in name else no_decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    if cfg.optimizer == "adam":
        return torch.optim.Adam(groups, lr=cfg.lr, betas=(cfg.momentum, 0.999))
    return torch.optim.SGD(groups, lr=cfg.lr, momentum=cfg.momentum, nesterov=True)


def lr_at(cfg: TrainConfig, epoch: int, it: int, iters_per_epoch: int) -> float:
    """Cosine decay from ``lr`` to ``final_lr`` with linear warmup."""
    progress = epoch / cfg.epochs
    lr = cfg.final_lr + (cfg.lr - cfg.final_lr) * 0.5 * (1 + math.cos(math.pi * progress))
    warmup = cfg.warmup_epochs * iters_per_epoch
    step = epoch * iters_per_epoch + it
    if warmup > 0 and step < warmup:
        lr *= (step + 1) / warmup
    return lr


def _jsonable(d: dict) -> dict:
    return {k: (round(v, 10) if isinstance(v, float) else v) for k, v in d.items()}


def train(
    model: Detector,
    train_source,
    cfg: TrainConfig,
    out_dir: str | Path,
    aug: AugmentConfig | None = None,
    loss_cfg: LossConfig = LossConfig(),
    val_source=None,
    run_config: dict | None = None,
    on_epoch: Callable[[int, dict], None] | None = None,
) -> dict:
    """Optimise ``model`` on ``train_source``; write checkpoints and ``metrics.jsonl``.

    Returns a summary with the last epoch's losses and the best validation mAP.
    """
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    metrics_path.write_text("")
    run_config = run_config or {"train": asdict(cfg)}
    mcfg = model.cfg
    aug = aug or AugmentConfig(target_size=mcfg.input_size, seed=cfg.seed)
    if aug.target_size != mcfg.input_size:
        raise ValueError(f"augment target_size {aug.target_size} != model input_size {mcfg.input_size}")

    torch.manual_seed(cfg.seed)
    dataset = AugmentedSource(train_source, aug, augment=cfg.augment)
    optimizer = make_optimizer(model, cfg)
    ema = ModelEMA(model, cfg.ema_decay) if cfg.ema else None
    iters_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    best_map, best_epoch, step = -1.0, -1, 0
    last = {}

    with open(metrics_path, "a") as mf:
        for epoch in range(cfg.epochs):
            dataset.epoch = epoch
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset)).tolist()
            loader = DataLoader(
                dataset, batch_size=cfg.batch_size, sampler=order, num_workers=cfg.workers, collate_fn=collate
            )
            model.train()
            sums = {"loc": 0.0, "obj": 0.0, "cls": 0.0, "total": 0.0}
            n = 0
            for it, (images, targets, ids) in enumerate(loader):
                lr = lr_at(cfg, epoch, it, iters_per_epoch)
                for g in optimizer.param_groups:
                    g["lr"] = lr
                raws = model(images)
                assignment = assign_batch(targets, mcfg.anchors, mcfg.input_size)
                try:
                    loss = deeploc_loss(raws, targets, assignment, mcfg.anchors, loss_cfg, mcfg.num_categories)
                    parts, reason = loss.as_dict(), "non-finite loss"
                except FloatingPointError as e:
                    loss, parts, reason = None, {}, str(e)
                if loss is None or not torch.isfinite(loss.total):
                    dump = out_dir / "diverged_batch.json"
                    info = {"epoch": epoch, "step": step, "image_ids": ids, "reason": reason, **parts}
                    dump.write_text(json.dumps(info, default=str))
                    raise TrainingDiverged(f"{reason} at epoch {epoch} step {step}; batch ids in {dump}")
                optimizer.zero_grad(set_to_none=True)
                loss.total.backward()
                optimizer.step()
                if ema is not None:
                    ema.update(model)
                row = {"type": "step", "step": step, "epoch": epoch, "lr": lr, **loss.as_dict()}
                mf.write(json.dumps(_jsonable(row)) + "\n")
                for k in sums:
                    sums[k] += row[k]
                n += 1
                step += 1
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break

            eval_model = ema.ema if ema is not None else model
            last = {k: v / max(n, 1) for k, v in sums.items()}
            epoch_row = {"type": "epoch", "epoch": epoch, **last}
            done = epoch == cfg.epochs - 1 or (cfg.max_steps is not None and step >= cfg.max_steps)
            if val_source is not None and len(val_source) and ((epoch + 1) % cfg.val_every == 0 or done):
                report = evaluate(eval_model, val_source, cfg.conf_threshold, cfg.nms_iou)
                epoch_row["val"] = _jsonable(report.row())
                if report.map50 > best_map:
                    best_map, best_epoch = report.map50, epoch
                    save_checkpoint(out_dir / "checkpoints" / "best.pt", eval_model, optimizer, epoch, run_config, epoch_row)
            mf.write(json.dumps(_jsonable(epoch_row)) + "\n")
            mf.flush()
            save_checkpoint(out_dir / "checkpoints" / "last.pt", eval_model, optimizer, epoch, run_config, epoch_row)
            if cfg.save_every and (epoch + 1) % cfg.save_every == 0:
                save_checkpoint(
                    out_dir / "checkpoints" / f"epoch_{epoch:04d}.pt", eval_model, optimizer, epoch, run_config, epoch_row
                )
            if on_epoch is not None:
                on_epoch(epoch, epoch_row)
            if done:
                break

    if best_epoch < 0:
        # no validation: the final weights are the best we have
        save_checkpoint(out_dir / "checkpoints" / "best.pt", eval_model, optimizer, epoch, run_config, epoch_row)
    return {"epochs_run": epoch + 1, "steps": step, "last": last, "best_val_map50": best_map, "best_epoch": best_epoch}
