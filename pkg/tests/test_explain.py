from __future__ import annotations

import json

import numpy as np
import pytest
import torch
import torch.nn as nn

from deeploc.explain import (
    DetectionTarget,
    default_layer,
    detect_with_slots,
    explain_detection,
    gradcam_pp,
    save_explanation,
)
from deeploc.model import ModelConfig, build


class Toy(nn.Module):
    """One-channel feature map at input resolution, read out by the score."""

    def __init__(self, channels=1):
        super().__init__()
        torch.manual_seed(0)
        self.feat = nn.Conv2d(3, channels, 3, padding=1)

    def forward(self, x):
        return self.feat(x)


def minmax(a):
    a = np.asarray(a, dtype=np.float64)
    return (a - a.min()) / (a.max() - a.min())


def test_zero_gradient_gives_zero_map():
    h = gradcam_pp(Toy(), torch.rand(1, 3, 12, 12), lambda out: out.sum() * 0.0, "feat")
    assert h.zero_gradient and h.values.shape == (12, 12) and not h.values.any()
    # a score that ignores the network entirely
    h = gradcam_pp(Toy(), torch.rand(1, 3, 12, 12), lambda out: torch.tensor(1.0), "feat")
    assert h.zero_gradient and not h.values.any()
    assert h.metadata()["zero_gradient"] is True


def test_single_channel_mean_score_is_positive_part():
    model = Toy()
    x = torch.rand(1, 3, 16, 20) * 2 - 1
    h = gradcam_pp(model, x, lambda out: out[0, 0].mean(), "feat")
    with torch.no_grad():
        expect = minmax(torch.relu(model(x)[0, 0]).numpy())
    assert np.abs(h.values - expect).max() < 1e-5


def test_single_channel_scale_invariance():
    # holds while the GradCAM++ denominator 2 + c * mean(A) keeps its sign,
    # so the feature is shifted to a positive mean
    model = Toy()
    with torch.no_grad():
        model.feat.bias += 1.0
    x = torch.rand(1, 3, 16, 16)
    assert float(model(x).detach().mean()) > 0
    base = gradcam_pp(model, x, lambda out: out[0, 0].mean(), "feat").values
    for c in (0.1, 3.0, 50.0):
        other = gradcam_pp(model, x, lambda out: c * out[0, 0].mean(), "feat").values
        assert np.abs(other - base).max() < 1e-5


def test_contract_and_determinism():
    model = Toy(channels=4)
    x = torch.rand(1, 3, 10, 14)
    score = lambda out: (out[0, 1] * out[0, 2]).sum() + out[0, 3, 2:5, 2:5].sum()  # noqa: E731
    a = gradcam_pp(model, x, score, "feat")
    b = gradcam_pp(model, x, score, "feat")
    assert a.values.shape == (10, 14)
    assert a.values.min() >= 0 and a.values.max() <= 1 and a.values.max() == pytest.approx(1.0)
    assert np.array_equal(a.values, b.values)


def test_bad_layer_and_batch():
    with pytest.raises(KeyError):
        gradcam_pp(Toy(), torch.rand(1, 3, 8, 8), lambda o: o.sum(), "nope")
    with pytest.raises(ValueError):
        gradcam_pp(Toy(), torch.rand(2, 3, 8, 8), lambda o: o.sum(), "feat")


def test_detection_heatmap_on_tiny_model(tmp_path):
    torch.manual_seed(0)
    model = build(ModelConfig(input_size=224, schedule="tiny")).eval()
    x = torch.rand(1, 3, 224, 224)
    dets = detect_with_slots(model, x, conf_threshold=0.0)
    assert dets
    target = dets[0]
    heat = explain_detection(model, x, target)
    assert heat.source_layer == default_layer(target.head)
    assert heat.values.shape == (224, 224)
    assert 0 <= heat.values.min() and heat.values.max() <= 1
    assert np.array_equal(heat.values, explain_detection(model, x, target).values)
    png = save_explanation(tmp_path / "ex", np.zeros((224, 224, 3), np.uint8), heat, target.box, "fracture")
    assert png.exists()
    meta = json.loads((tmp_path / "ex.json").read_text())
    assert meta["target"]["head"] == target.head and meta["label"] == "fracture"


def test_detection_target_dict():
    t = DetectionTarget(1, 2, 3, 4, 0)
    assert t.to_dict() == {"head": 1, "anchor": 2, "cell_y": 3, "cell_x": 4, "category": 0}
