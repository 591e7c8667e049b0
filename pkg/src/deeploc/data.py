"""Dataset schema, YOLO-format label I/O and train/val/test splitting."""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import cv2
import numpy as np
import yaml

from .geometry import BoundingBox

log = logging.getLogger(__name__)

RAW_NAMES = (
    "bone anomaly",
    "bone lesion",
    "foreign body",
    "fracture",
    "metal",
    "periosteal reaction",
    "pronator sign",
    "soft-tissue",
    "text",
)
MERGED_NAMES = ("fracture", "foreign_body", "periosteal_reaction", "bone_lesion")
SHORT_NAMES = ("F", "FB", "PR", "BL")

_DEFAULT_MAPPING = {
    "bone anomaly": "bone_lesion",
    "bone lesion": "bone_lesion",
    "foreign body": "foreign_body",
    "metal": "foreign_body",
    "fracture": "fracture",
    "periosteal reaction": "periosteal_reaction",
    "pronator sign": None,
    "soft-tissue": None,
    "text": None,
}

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class LabelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CategorySchema:
    """Maps raw annotation categories onto the merged label space.

    A raw name mapping to ``None`` is dropped at load time.
    """

    raw_names: tuple[str, ...] = RAW_NAMES
    merged_names: tuple[str, ...] = MERGED_NAMES
    mapping: dict = field(default_factory=lambda: dict(_DEFAULT_MAPPING))

    def __post_init__(self):
        for raw in self.raw_names:
            if raw not in self.mapping:
                raise ValueError(f"raw category {raw!r} has no mapping")
            target = self.mapping[raw]
            if target is not None and target not in self.merged_names:
                raise ValueError(f"raw category {raw!r} maps to unknown target {target!r}")

    @classmethod
    def identity(cls, names: Sequence[str] = MERGED_NAMES) -> "CategorySchema":
        """Schema for files that already carry merged ids."""
        names = tuple(names)
        return cls(raw_names=names, merged_names=names, mapping={n: n for n in names})

    @property
    def num_categories(self) -> int:
        return len(self.merged_names)

    def merge_id(self, raw_id: int) -> int | None:
        if not 0 <= raw_id < len(self.raw_names):
            raise KeyError(raw_id)
        target = self.mapping[self.raw_names[raw_id]]
        return None if target is None else self.merged_names.index(target)


@dataclass
class Sample:
    image_id: str
    image: np.ndarray
    boxes: list[BoundingBox]

    def __post_init__(self):
        for b in self.boxes:
            if not all(0.0 <= v <= 1.0 for v in (b.cx, b.cy, b.w, b.h)):
                raise ValueError(f"{self.image_id}: box coordinates outside [0, 1]: {b}")


@dataclass(frozen=True)
class SplitManifest:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, ids in (("train", self.train_ids), ("val", self.val_ids), ("test", self.test_ids)):
            (directory / f"{name}.txt").write_text("".join(f"{i}\n" for i in ids))
        (directory / "seed.txt").write_text(f"{self.seed}\n")

    @classmethod
    def load(cls, directory: str | Path) -> "SplitManifest":
        directory = Path(directory)

        def read(name):
            return tuple((directory / f"{name}.txt").read_text().split())

        return cls(read("train"), read("val"), read("test"), int((directory / "seed.txt").read_text()))

    def ids(self, split: str) -> tuple[str, ...]:
        return {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}[split]


def _parse_lines(path: Path, schema: CategorySchema | None, with_confidence: bool):
    schema = schema or CategorySchema.identity()
    ncols = 6 if with_confidence else 5
    boxes = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != ncols:
            raise LabelFormatError(f"{path}:{lineno}: expected {ncols} fields, got {len(parts)}")
        try:
            raw_id = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:5])
            conf = float(parts[5]) if with_confidence else None
        except ValueError as e:
            raise LabelFormatError(f"{path}:{lineno}: {e}") from None
        for v in (cx, cy, w, h):
            if not 0.0 <= v <= 1.0:
                raise LabelFormatError(f"{path}:{lineno}: coordinate {v} outside [0, 1]")
        try:
            cat = schema.merge_id(raw_id)
        except KeyError:
            raise LabelFormatError(f"{path}:{lineno}: unknown category id {raw_id}") from None
        if cat is None:
            continue
        try:
            boxes.append(BoundingBox(cx, cy, w, h, cat, conf))
        except ValueError as e:
            raise LabelFormatError(f"{path}:{lineno}: {e}") from None
    return boxes


def load_labels(path: str | Path, schema: CategorySchema | None = None) -> list[BoundingBox]:
    """Read a YOLO label file (``class cx cy w h`` per line).

    Raw ids are mapped through ``schema``; dropped categories are skipped.
    Without a schema the ids are taken as already-merged.
    """
    return _parse_lines(Path(path), schema, with_confidence=False)


def load_detections(path: str | Path) -> list[BoundingBox]:
    """Read a detection file (``class cx cy w h conf`` per line)."""
    return _parse_lines(Path(path), None, with_confidence=True)


def format_box(box: BoundingBox, with_confidence: bool = False) -> str:
    line = f"{box.category_id} {box.cx:.6f} {box.cy:.6f} {box.w:.6f} {box.h:.6f}"
    if with_confidence:
        line += f" {box.confidence:.6f}"
    return line


def save_labels(path: str | Path, boxes: Sequence[BoundingBox], with_confidence: bool = False) -> None:
    Path(path).write_text("".join(format_box(b, with_confidence) + "\n" for b in boxes))


def patient_id(image_id: str) -> str:
    """GRAZPEDWRI-DX file stems start with the patient id (``0001_1297860395_01_...``)."""
    return image_id.split("_")[0]


def make_split(
    ids: Sequence[str],
    seed: int,
    split_by: str = "image",
    group_fn: Callable[[str], str] = patient_id,
) -> SplitManifest:
    """Shuffle ``ids`` deterministically and cut 70/20/10.

    Train and val sizes are ``0.7 n`` and ``0.2 n`` rounded to the nearest
    integer; test takes the remainder. With ``split_by="patient"`` whole
    patient groups are assigned so no patient straddles two splits (sizes
    are then approximate).
    """
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    if len(ids) < 10:
        raise ValueError(f"need at least 10 ids for a 70/20/10 split, got {len(ids)}")
    n = len(ids)
    n_train = math.floor(0.7 * n + 0.5)
    n_val = math.floor(0.2 * n + 0.5)
    rng = random.Random(seed)

    if split_by == "image":
        order = sorted(ids)
        rng.shuffle(order)
        return SplitManifest(
            tuple(order[:n_train]), tuple(order[n_train : n_train + n_val]), tuple(order[n_train + n_val :]), seed
        )
    if split_by != "patient":
        raise ValueError(f"split_by must be 'image' or 'patient', got {split_by!r}")

    groups: dict[str, list[str]] = {}
    for i in sorted(ids):
        groups.setdefault(group_fn(i), []).append(i)
    keys = sorted(groups)
    rng.shuffle(keys)
    train, val, test = [], [], []
    for k in keys:
        bucket = train if len(train) < n_train else val if len(val) < n_val else test
        bucket.extend(groups[k])
    return SplitManifest(tuple(train), tuple(val), tuple(test), seed)


def read_image(path: str | Path) -> np.ndarray:
    """Load an image as HxWx3 uint8; grayscale is replicated to 3 channels."""
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise FileNotFoundError(path)
    if image.dtype != np.uint8:
        image = cv2.normalize(image, None, 0, 255, cv2.NORM_MINMAX).astype(np.uint8)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    elif image.shape[2] == 4:
        image = image[:, :, :3]
    return np.ascontiguousarray(image)


@dataclass
class DatasetManifest:
    """Location of one YOLO-format dataset plus its split settings."""

    image_dir: Path
    label_dir: Path
    schema: str = "raw"
    split_seed: int = 0
    split_by: str = "image"
    split_dir: Path | None = None

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        raw = yaml.safe_load(path.read_text()) or {}
        base = path.parent

        def resolve(p):
            p = Path(p)
            return p if p.is_absolute() else base / p

        unknown = set(raw) - {"image_dir", "label_dir", "schema", "split_seed", "split_by", "split_dir"}
        if unknown:
            raise ValueError(f"{path}: unknown dataset fields {sorted(unknown)}")
        return cls(
            image_dir=resolve(raw["image_dir"]),
            label_dir=resolve(raw["label_dir"]),
            schema=raw.get("schema", "raw"),
            split_seed=int(raw.get("split_seed", 0)),
            split_by=raw.get("split_by", "image"),
            split_dir=resolve(raw["split_dir"]) if raw.get("split_dir") else None,
        )

    def category_schema(self) -> CategorySchema:
        if self.schema == "raw":
            return CategorySchema()
        if self.schema == "merged":
            return CategorySchema.identity()
        raise ValueError(f"schema must be 'raw' or 'merged', got {self.schema!r}")

    def image_paths(self) -> dict[str, Path]:
        return {
            p.stem: p for p in sorted(self.image_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES
        }

    def split(self) -> SplitManifest:
        if self.split_dir is not None and (self.split_dir / "train.txt").exists():
            return SplitManifest.load(self.split_dir)
        manifest = make_split(sorted(self.image_paths()), self.split_seed, self.split_by)
        if self.split_dir is not None:
            manifest.save(self.split_dir)
        return manifest


class YoloDataset:
    """Lazy sample source over an image directory and a label directory."""

    def __init__(self, image_dir, label_dir, ids: Sequence[str] | None = None, schema: CategorySchema | None = None):
        self.image_dir = Path(image_dir)
        self.label_dir = Path(label_dir)
        self.schema = schema
        paths = {p.stem: p for p in sorted(self.image_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
        if ids is None:
            ids = sorted(paths)
        missing = [i for i in ids if i not in paths]
        if missing:
            raise FileNotFoundError(f"{len(missing)} ids have no image in {self.image_dir}, e.g. {missing[0]}")
        self.ids = list(ids)
        self._paths = paths

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, split: str | None = None) -> "YoloDataset":
        ids = manifest.split().ids(split) if split else None
        return cls(manifest.image_dir, manifest.label_dir, ids, manifest.category_schema())

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, index: int) -> Sample:
        image_id = self.ids[index]
        label_path = self.label_dir / f"{image_id}.txt"
        boxes = load_labels(label_path, self.schema) if label_path.exists() else []
        if not label_path.exists():
            log.debug("no label file for %s", image_id)
        return Sample(image_id, read_image(self._paths[image_id]), boxes)


class InMemoryDataset:
    def __init__(self, samples: Sequence[Sample]):
        self.samples = list(samples)
        self.ids = [s.image_id for s in self.samples]

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Sample:
        return self.samples[index]


def write_dataset(samples: Sequence[Sample], root: str | Path) -> DatasetManifest:
    """Persist samples as ``images/*.png`` + ``labels/*.txt`` and a manifest."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for s in samples:
        cv2.imwrite(str(root / "images" / f"{s.image_id}.png"), s.image)
        save_labels(root / "labels" / f"{s.image_id}.txt", s.boxes)
    (root / "dataset.yaml").write_text(
        yaml.safe_dump({"image_dir": "images", "label_dir": "labels", "schema": "merged", "split_seed": 0})
    )
    return DatasetManifest.load(root / "dataset.yaml")
