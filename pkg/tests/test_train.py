from __future__ import annotations

import json
import math

import pytest
import torch

from deeploc.model import ModelConfig, build, placement_preset
from deeploc.preprocess import AugmentConfig
from deeploc.synthetic import rectangle_dataset
from deeploc.train import (
    TrainConfig,
    TrainingDiverged,
    collate,
    evaluate,
    load_checkpoint,
    lr_at,
    make_optimizer,
    train,
)

SIZE = 64


def small_model(seed=0, variant="yolov7"):
    torch.manual_seed(seed)
    return build(ModelConfig(input_size=SIZE, schedule="tiny", placement=placement_preset(variant)))


def data(n=6, seed=0):
    return rectangle_dataset(n, SIZE, seed=seed, min_side=8, max_side=24)


def fast_cfg(**kw):
    base = dict(epochs=2, batch_size=4, lr=1e-3, final_lr=1e-4, warmup_epochs=0.0, augment=True, optimizer="adam")
    base.update(kw)
    return TrainConfig(**base)


def test_zero_lr_leaves_weights_unchanged(tmp_path):
    model = small_model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train(model, data(), fast_cfg(epochs=1, lr=0.0, final_lr=0.0, optimizer="sgd"), tmp_path)
    after = model.state_dict()
    changed_stats = False
    for k, v in before.items():
        if k.endswith(("running_mean", "running_var", "num_batches_tracked")):
            changed_stats |= not torch.equal(v, after[k])
            continue
        assert torch.equal(v, after[k]), k
    assert changed_stats  # the BN statistics did move, so training really ran


def test_seeded_runs_are_identical(tmp_path):
    for run in ("a", "b"):
        train(small_model(), data(), fast_cfg(), tmp_path / run)
    a = (tmp_path / "a" / "metrics.jsonl").read_text()
    assert a and a == (tmp_path / "b" / "metrics.jsonl").read_text()


def test_metrics_stream_and_checkpoints(tmp_path):
    ds = data(8)
    summary = train(small_model(), ds[:6], fast_cfg(), tmp_path, val_source=ds[6:])
    rows = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    steps = [r for r in rows if r["type"] == "step"]
    epochs = [r for r in rows if r["type"] == "epoch"]
    assert len(steps) == 4 and len(epochs) == 2 and summary["steps"] == 4
    assert {"loc", "obj", "cls", "total", "lr"} <= set(steps[0])
    assert all("val" in e and "mAP50" in e["val"] for e in epochs)
    for name in ("last.pt", "best.pt"):
        model, ckpt = load_checkpoint(tmp_path / "checkpoints" / name)
        assert not model.training
        assert {"version", "epoch", "model", "optimizer", "model_config", "fingerprint"} <= set(ckpt)
    model, _ = load_checkpoint(tmp_path / "checkpoints" / "last.pt")
    x = collate([ds[0]])[0]
    again, _ = load_checkpoint(tmp_path / "checkpoints" / "last.pt")
    with torch.no_grad():
        assert all(torch.equal(p, q) for p, q in zip(model(x), again(x)))


def test_max_steps_and_best_without_validation(tmp_path):
    summary = train(small_model(), data(), fast_cfg(epochs=5, max_steps=3), tmp_path)
    assert summary["steps"] == 3 and summary["best_epoch"] == -1
    assert (tmp_path / "checkpoints" / "best.pt").exists()


def test_divergence_dumps_batch(tmp_path):
    model = small_model()
    with torch.no_grad():
        model.heads[0].predict.weight.fill_(float("nan"))
    with pytest.raises(TrainingDiverged):
        train(model, data(), fast_cfg(augment=False), tmp_path)
    dump = json.loads((tmp_path / "diverged_batch.json").read_text())
    assert dump["step"] == 0 and len(dump["image_ids"]) == 4 and "head 0" in dump["reason"]


def test_augment_size_must_match_model(tmp_path):
    with pytest.raises(ValueError):
        train(small_model(), data(), fast_cfg(), tmp_path, aug=AugmentConfig(target_size=96))


def test_lr_schedule():
    cfg = TrainConfig(epochs=10, lr=1e-2, final_lr=1e-3, warmup_epochs=1.0)
    assert lr_at(cfg, 0, 0, 4) == pytest.approx(1e-2 / 4)
    assert lr_at(cfg, 0, 3, 4) == pytest.approx(1e-2)
    assert lr_at(cfg, 5, 0, 4) == pytest.approx(1e-3 + 9e-3 * 0.5 * (1 + math.cos(math.pi / 2)))
    assert lr_at(cfg, 9, 3, 4) > 1e-3


def test_optimizer_groups():
    torch.manual_seed(0)
    model = build(ModelConfig(input_size=224, schedule="tiny"))
    decay, no_decay = make_optimizer(model, TrainConfig()).param_groups
    tables = {id(p) for n, p in model.named_parameters() if "rel_bias_table" in n}
    assert tables and tables <= {id(p) for p in no_decay["params"]}
    assert all(p.ndim > 1 and id(p) not in tables for p in decay["params"])
    assert decay["weight_decay"] == 5e-4 and no_decay["weight_decay"] == 0.0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")


def test_evaluate_untrained(tmp_path):
    report = evaluate(small_model().eval(), data(4))
    assert 0.0 <= report.map50 <= 1.0
    with pytest.raises(ValueError):
        evaluate(small_model().eval(), [])
