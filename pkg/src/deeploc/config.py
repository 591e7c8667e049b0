"""Run configuration: YAML loading, ``${VAR}`` interpolation and dotted overrides."""

from __future__ import annotations

import os
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import yaml

from .data import DatasetManifest, InMemoryDataset, Sample, YoloDataset, make_split
from .loss import LossConfig, LossWeights
from .model import ConfigError, ModelConfig
from .preprocess import AugmentConfig, ClaheConfig, enhance
from .train import TrainConfig

SEED_ENV = "DEEPLOC_SEED"
_VAR = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")


def interpolate(value: Any) -> Any:
    """Expand ``${VAR}`` / ``${VAR:-default}`` in every string of a nested structure."""
    if isinstance(value, dict):
        return {k: interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate(v) for v in value]
    if not isinstance(value, str):
        return value

    def sub(m):
        name, default = m.group(1), m.group(2)
        if name in os.environ:
            return os.environ[name]
        if default is not None:
            return default
        raise ConfigError(f"environment variable {name} is not set")

    out = _VAR.sub(sub, value)
    # a string that was only a reference gets its YAML type back (numbers, bools)
    return yaml.safe_load(out) if out != value and _VAR.fullmatch(value) else out


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``--a.b value`` / ``--a.b=value`` pairs; values are parsed as YAML."""
    raw = dict(raw)
    items = list(overrides)
    i = 0
    while i < len(items):
        tok = items[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --section.key value")
        key = tok[2:]
        if "=" in key:
            key, text = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(items):
                raise ConfigError(f"override {tok} has no value")
            text = items[i + 1]
            i += 2
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            child = node.get(p)
            node[p] = dict(child) if isinstance(child, dict) else {}
            node = node[p]
        node[parts[-1]] = yaml.safe_load(text)
    return raw


def _build(cls, section: str, values: dict | None):
    values = dict(values or {})
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"{section}: unknown fields {sorted(unknown)}; expected some of {sorted(names)}")
    for k, v in values.items():
        if isinstance(v, list):
            values[k] = tuple(v)
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from None


@dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None
    # synthetic rectangles instead of a manifest: {n, size, seed, max_boxes}
    synthetic: dict | None = None
    # "auto": manifest split (70/20/10); "none": every split is the whole set
    split: str = "auto"
    enhance: str = "none"

    def __post_init__(self):
        if (self.manifest is None) == (self.synthetic is None):
            raise ConfigError("data: give exactly one of data.manifest or data.synthetic")
        if self.split not in ("auto", "none"):
            raise ConfigError(f"data.split must be auto or none, got {self.split!r}")
        if self.enhance not in ("none", "clahe", "um_median", "um_gaussian"):
            raise ConfigError(f"data.enhance must be none, clahe, um_median or um_gaussian, got {self.enhance!r}")


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    output_dir: str = "runs"
    seed: int = 0
    data: DataConfig = field(default_factory=lambda: DataConfig(synthetic={"n": 8, "size": 224}))
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    clahe: ClaheConfig = field(default_factory=ClaheConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.name

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = interpolate(dict(raw or {}))
        top = {"name", "output_dir", "seed", "data", "model", "train", "augment", "clahe", "loss"}
        unknown = set(raw) - top
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}; expected some of {sorted(top)}")
        seed = raw.get("seed")
        if seed is None:
            seed = int(os.environ.get(SEED_ENV, 0))
        model = ModelConfig.from_dict(raw.get("model") or {})
        train_raw = {"seed": seed, **(raw.get("train") or {})}
        aug_raw = {"target_size": model.input_size, "seed": seed, **(raw.get("augment") or {})}
        train = _build(TrainConfig, "train", train_raw)
        augment = _build(AugmentConfig, "augment", aug_raw)
        if augment.target_size != model.input_size:
            raise ConfigError(
                f"augment.target_size ({augment.target_size}) must equal model.input_size ({model.input_size})"
            )
        loss_raw = dict(raw.get("loss") or {})
        weights = _build(LossWeights, "loss.weights", loss_raw.pop("weights", None))
        loss = _build(LossConfig, "loss", {**loss_raw, "weights": weights})
        if len(weights.head_weights) != len(model.anchors.strides):
            raise ConfigError("loss.weights.head_weights needs one weight per detection head")
        return cls(
            name=str(raw.get("name", "run")),
            output_dir=str(raw.get("output_dir", "runs")),
            seed=int(seed),
            data=_build(DataConfig, "data", raw.get("data") or {"synthetic": {"n": 8, "size": model.input_size}}),
            model=model,
            train=train,
            augment=augment,
            clahe=_build(ClaheConfig, "clahe", raw.get("clahe")),
            loss=loss,
        )

    def to_dict(self) -> dict:
        loss = asdict(self.loss)
        loss["weights"]["head_weights"] = list(loss["weights"]["head_weights"])
        return {
            "name": self.name,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "data": asdict(self.data),
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "augment": asdict(self.augment),
            "clahe": asdict(self.clahe),
            "loss": loss,
        }

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def with_model(self, model: ModelConfig) -> "RunConfig":
        return replace(self, model=model, augment=replace(self.augment, target_size=model.input_size))


def load_run_config(path: str | Path | None, overrides: Sequence[str] = ()) -> RunConfig:
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw = yaml.safe_load(path.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(apply_overrides(raw, overrides))


class EnhancedSource:
    """Applies a fixed enhancement to every sample of another source."""

    def __init__(self, source, method: str, clahe_cfg: ClaheConfig):
        self.source = source
        self.ids = getattr(source, "ids", None)
        self._fn = lambda img: enhance(img, method, clahe_cfg)

    def __len__(self):
        return len(self.source)

    def __getitem__(self, i):
        s = self.source[i]
        return Sample(s.image_id, self._fn(s.image), s.boxes)


def load_splits(cfg: RunConfig) -> dict:
    """``{"train": source, "val": source, "test": source}`` for the configured data."""
    data = cfg.data
    if data.synthetic is not None:
        from .synthetic import rectangle_dataset

        opts = {"n": 8, "size": cfg.model.input_size, "seed": cfg.seed, **data.synthetic}
        samples = rectangle_dataset(opts.pop("n"), opts.pop("size"), opts.pop("seed"), **opts)
        if data.split == "none":
            src = InMemoryDataset(samples)
            splits = {"train": src, "val": src, "test": src}
        else:
            by_id = {s.image_id: s for s in samples}
            m = make_split(sorted(by_id), cfg.seed)
            splits = {k: InMemoryDataset([by_id[i] for i in m.ids(k)]) for k in ("train", "val", "test")}
    else:
        manifest = DatasetManifest.load(data.manifest)
        if data.split == "none":
            full = YoloDataset(manifest.image_dir, manifest.label_dir, schema=manifest.category_schema())
            splits = {"train": full, "val": full, "test": full}
        else:
            splits = {k: YoloDataset.from_manifest(manifest, k) for k in ("train", "val", "test")}
    if data.enhance != "none":
        splits = {k: EnhancedSource(v, data.enhance, cfg.clahe) for k, v in splits.items()}
    return splits

