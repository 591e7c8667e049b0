from __future__ import annotations

import random

import cv2
import numpy as np
import pytest

from deeploc.data import (
    MERGED_NAMES,
    CategorySchema,
    DatasetManifest,
    LabelFormatError,
    Sample,
    SplitManifest,
    YoloDataset,
    load_detections,
    load_labels,
    make_split,
    read_image,
    save_labels,
    write_dataset,
)
from deeploc.geometry import BoundingBox
from deeploc.synthetic import rectangle_dataset

RAW = CategorySchema()


def test_fracture_line_maps_to_fracture(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("3 0.5 0.5 0.2 0.1\n")
    (box,) = load_labels(p, RAW)
    assert MERGED_NAMES[box.category_id] == "fracture"
    assert (box.cx, box.cy, box.w, box.h) == (0.5, 0.5, 0.2, 0.1)


def test_foreign_body_and_metal_merge(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("2 0.3 0.3 0.1 0.1\n4 0.6 0.6 0.1 0.2\n")
    boxes = load_labels(p, RAW)
    assert [MERGED_NAMES[b.category_id] for b in boxes] == ["foreign_body", "foreign_body"]


def test_text_category_dropped(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("8 0.5 0.5 0.2 0.1\n")
    assert load_labels(p, RAW) == []
    # the schema itself agrees
    assert RAW.merge_id(8) is None


def test_every_raw_category_is_mapped():
    for i in range(len(RAW.raw_names)):
        m = RAW.merge_id(i)
        assert m is None or 0 <= m < len(MERGED_NAMES)


@pytest.mark.parametrize(
    "line", ["3 0.5 0.5 0.2", "x 0.5 0.5 0.2 0.1", "3 1.5 0.5 0.2 0.1", "3 0.5 0.5 0 0.1", "12 0.5 0.5 0.2 0.1"]
)
def test_malformed_lines_name_the_location(tmp_path, line):
    p = tmp_path / "bad.txt"
    p.write_text("3 0.5 0.5 0.2 0.1\n" + line + "\n")
    with pytest.raises(LabelFormatError, match="bad.txt:2"):
        load_labels(p, RAW)


def test_label_roundtrip(tmp_path):
    rng = random.Random(0)
    boxes = [
        BoundingBox(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.01, 0.3), rng.uniform(0.01, 0.3), rng.randrange(4))
        for _ in range(30)
    ]
    p = tmp_path / "r.txt"
    save_labels(p, boxes)
    back = load_labels(p)
    for a, b in zip(boxes, back):
        assert a.category_id == b.category_id
        for f in ("cx", "cy", "w", "h"):
            assert getattr(a, f) == pytest.approx(getattr(b, f), abs=1e-6)


def test_detection_files_roundtrip(tmp_path):
    boxes = [BoundingBox(0.5, 0.5, 0.1, 0.2, 1, 0.75), BoundingBox(0.2, 0.3, 0.1, 0.1, 0, 0.001)]
    save_labels(tmp_path / "d.txt", boxes, with_confidence=True)
    back = load_detections(tmp_path / "d.txt")
    assert [b.confidence for b in back] == pytest.approx([0.75, 0.001])


def test_split_sizes():
    ids = [f"img{i:03d}" for i in range(10)]
    for seed in range(5):
        m = make_split(ids, seed)
        assert (len(m.train_ids), len(m.val_ids), len(m.test_ids)) == (7, 2, 1)
    big = make_split([str(i) for i in range(20327)], 0)
    assert (len(big.train_ids), len(big.val_ids), len(big.test_ids)) == (14229, 4065, 2033)


def test_split_deterministic_and_partition():
    ids = [f"{p:04d}_{i}" for p in range(40) for i in range(3)]
    a, b = make_split(ids, 7), make_split(list(reversed(ids)), 7)
    assert a == b
    union = a.train_ids + a.val_ids + a.test_ids
    assert sorted(union) == sorted(ids) and len(set(union)) == len(ids)
    assert make_split(ids, 8) != a


def test_split_by_patient_keeps_patients_together():
    ids = [f"{p:04d}_{i}" for p in range(40) for i in range(3)]
    m = make_split(ids, 1, split_by="patient")
    owner = {}
    for name in ("train", "val", "test"):
        for i in m.ids(name):
            assert owner.setdefault(i.split("_")[0], name) == name


def test_split_errors():
    with pytest.raises(ValueError):
        make_split(["a", "b"], 0)
    with pytest.raises(ValueError):
        make_split([str(i) for i in range(12)], 0, split_by="hospital")


def test_split_manifest_persistence(tmp_path):
    m = make_split([str(i) for i in range(25)], 3)
    m.save(tmp_path)
    assert SplitManifest.load(tmp_path) == m
    assert (tmp_path / "train.txt").read_text().split() == list(m.train_ids)


def test_grayscale_replicated(tmp_path):
    img = (np.arange(64, dtype=np.uint8).reshape(8, 8)) * 3
    cv2.imwrite(str(tmp_path / "g.png"), img)
    out = read_image(tmp_path / "g.png")
    assert out.shape == (8, 8, 3)
    assert (out[..., 0] == img).all() and (out[..., 2] == img).all()


def test_sample_rejects_out_of_range():
    with pytest.raises(ValueError):
        Sample("x", np.zeros((4, 4, 3), np.uint8), [BoundingBox(1.2, 0.5, 0.1, 0.1)])


def test_dataset_from_manifest(tmp_path):
    samples = rectangle_dataset(12, 64, seed=1, min_side=8, max_side=24)
    manifest = write_dataset(samples, tmp_path / "ds")
    ds = YoloDataset.from_manifest(manifest, "train")
    assert len(ds) == 8
    s = ds[0]
    orig = {x.image_id: x for x in samples}[s.image_id]
    assert s.image.shape == (64, 64, 3)
    assert len(s.boxes) == len(orig.boxes)
    assert DatasetManifest.load(tmp_path / "ds" / "dataset.yaml").schema == "merged"


def test_manifest_rejects_unknown_fields(tmp_path):
    (tmp_path / "m.yaml").write_text("image_dir: a\nlabel_dir: b\nsplits: 3\n")
    with pytest.raises(ValueError, match="splits"):
        DatasetManifest.load(tmp_path / "m.yaml")


def test_synthetic_labels_match_pixels():
    for s in rectangle_dataset(5, 96, seed=3, min_side=8, max_side=30):
        for b in s.boxes:
            x1, y1, x2, y2 = (int(round(v)) for v in b.to_xyxy(96, 96))
            patch = s.image[y1:y2, x1:x2, 0]
            assert (patch == patch[0, 0]).all() and patch[0, 0] != 20
