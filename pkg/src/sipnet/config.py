"""Strict JSON experiment configuration and per-dataset profiles."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import Volume, normalize_zscore, resample, truncate_intensity
from .model import ModelConfig
from .tensor import ConfigError
from .trainer import TrainConfig

# spacing is (x, y, z) mm; patch / stride are (depth, height, width) voxels
PROFILES = {
    "prostate": {"spacing": (0.625, 0.625, 1.5), "truncate": None, "patch": (16, 96, 96), "stride": (8, 48, 48)},
    "pancreas": {"spacing": (1.0, 1.0, 1.0), "truncate": None, "patch": (64, 96, 96), "stride": (32, 48, 48)},
    "liver": {"spacing": None, "truncate": (-200.0, 200.0), "patch": (16, 224, 224), "stride": (8, 112, 112)},
    "phantom": {"spacing": None, "truncate": None, "patch": (16, 64, 64), "stride": (8, 32, 32)},
}


def preprocess(profile: str, image: Volume, label: Volume | None = None):
    """Profile pipeline: optional truncation, resampling, then z-score."""
    prof = PROFILES[profile]
    if prof["truncate"] is not None:
        image = truncate_intensity(image, *prof["truncate"])
    if prof["spacing"] is not None:
        image = resample(image, prof["spacing"])
        if label is not None:
            label = resample(label, prof["spacing"])
    image = normalize_zscore(image)
    return image, label


@dataclass
class DataSection:
    manifest: Optional[str] = None
    profile: str = "phantom"


@dataclass
class InferSection:
    patch: Optional[tuple] = None
    stride: Optional[tuple] = None
    threshold: float = 0.5


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)
    infer: InferSection = field(default_factory=InferSection)
    seed: int = 0
    base_dir: Path = Path(".")

    @property
    def patch(self) -> tuple:
        return tuple(self.infer.patch or PROFILES[self.data.profile]["patch"])

    @property
    def stride(self) -> tuple:
        return tuple(self.infer.stride or PROFILES[self.data.profile]["stride"])

    def manifest_path(self) -> Path:
        if not self.data.manifest:
            raise ConfigError("data.manifest is required for this command")
        p = Path(self.data.manifest)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": dataclasses.asdict(self.data),
            "infer": {
                "patch": list(self.infer.patch) if self.infer.patch else None,
                "stride": list(self.infer.stride) if self.infer.stride else None,
                "threshold": self.infer.threshold,
            },
            "seed": self.seed,
        }


def _strict(section: str, d, cls) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"section '{section}' must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    return d


def parse_config(doc: dict, base_dir=".") -> ExperimentConfig:
    """Build an ExperimentConfig; profile constants fill any unset patch/stride."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    top = {"model", "train", "data", "infer", "seed"}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")

    data = DataSection(**_strict("data", doc.get("data", {}), DataSection))
    if data.profile not in PROFILES:
        raise ConfigError(f"data.profile must be one of {sorted(PROFILES)}, got {data.profile!r}")
    prof = PROFILES[data.profile]
    infer = InferSection(**_strict("infer", doc.get("infer", {}), InferSection))

    train_d = dict(_strict("train", doc.get("train", {}), TrainConfig))
    train_d.setdefault("patch", list(infer.patch or prof["patch"]))
    train_d.setdefault("seed", seed)
    model_d = dict(_strict("model", doc.get("model", {}), ModelConfig))
    model_d.setdefault("input_patch", list(train_d["patch"]))
    try:
        model = ModelConfig.from_dict(model_d)
        train = TrainConfig.from_dict(train_d)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    if infer.patch is not None:
        infer.patch = tuple(infer.patch)
    if infer.stride is not None:
        infer.stride = tuple(infer.stride)
    return ExperimentConfig(model, train, data, infer, seed, Path(base_dir))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from None
    return parse_config(doc, path.parent)


def with_overrides(cfg: ExperimentConfig, model: dict | None = None, train: dict | None = None) -> ExperimentConfig:
    out = copy.deepcopy(cfg)
    if model:
        merged = {**out.model.to_dict(), **model}
        if "variant" in model and "deep_supervision" not in model:
            merged["deep_supervision"] = None
        out.model = ModelConfig.from_dict(merged)
    if train:
        out.train = TrainConfig.from_dict({**out.train.to_dict(), **train})
    return out
