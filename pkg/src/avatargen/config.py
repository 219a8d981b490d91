"""Run configuration shared by the command-line entry points."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import DataConfig
from .diffusion.model import DiffusionConfig
from .diffusion.train import Stage1Config
from .errors import ConfigError
from .metrics import LossWeights
from .recon.model import ReconConfig
from .recon.train import Stage2Config

# flat keys accepted at the top level of a config file
_FLAT = {
    "views": [("data", "views")],
    "resolution": [("data", "resolution")],
    "T": [("stage1", "T")],
    "guidance_scale": [("stage1", "guidance_scale")],
    "drop_prob": [("stage1", "drop_prob")],
    "face_mask_prob": [("stage1", "face_mask_prob")],
    "lr": [("stage1", "lr")],
    "lr1": [("stage1", "lr")],
    "lr2": [("stage2", "lr")],
    "seed": [("data", "seed"), ("stage1", "seed"), ("stage2", "seed")],
}
_SECTIONS = ("data", "stage1", "stage2")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    stage1: Stage1Config = field(default_factory=lambda: Stage1Config(model=DiffusionConfig()))
    stage2: Stage2Config = field(default_factory=lambda: Stage2Config(model=ReconConfig()))
    dataset: str | None = None
    output: str | None = None

    def __post_init__(self):
        res = self.data.resolution
        if self.stage1.model.image_size != res or self.stage2.model.image_size != res:
            raise ConfigError(f"resolution: model image sizes must equal the data resolution {res}")
        if self.stage1.model.face_resolution != self.data.face_resolution or \
                self.stage2.model.face_resolution != self.data.face_resolution:
            raise ConfigError("face_resolution: models and data disagree")
        if self.stage2.model.uv_resolution != self.data.uv_resolution:
            raise ConfigError("uv_resolution: stage-2 model and data disagree")
        for name, views in (("stage1.views", self.stage1.views), ("stage2.input_views", self.stage2.input_views)):
            if views is not None and max(views) >= self.data.views:
                raise ConfigError(f"{name}: ring index out of range for {self.data.views} views")

    @property
    def seed(self) -> int:
        return self.data.seed

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, data=replace(self.data, seed=seed), stage1=replace(self.stage1, seed=seed),
                       stage2=replace(self.stage2, seed=seed))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        sections = {s: dict(d.get(s) or {}) for s in _SECTIONS}
        for key, value in d.items():
            if key in _SECTIONS or key in ("dataset", "output"):
                continue
            if key not in _FLAT:
                raise ConfigError(f"{key}: unknown config field")
            for section, name in _FLAT[key]:
                sections[section].setdefault(name, value)
        if "resolution" in d or "face_resolution" in sections["data"] or "uv_resolution" in sections["data"]:
            data = sections["data"]
            for s, keys in (("stage1", ("image_size", "face_resolution")),
                            ("stage2", ("image_size", "face_resolution", "uv_resolution"))):
                model = sections[s].setdefault("model", {})
                for k in keys:
                    src = "resolution" if k == "image_size" else k
                    if src in data:
                        model.setdefault(k, data[src])
        try:
            data = _build(DataConfig, sections["data"], "data")
            s1 = dict(sections["stage1"])
            s1["model"] = _build(DiffusionConfig, s1.get("model", {}), "stage1.model")
            stage1 = _build(Stage1Config, s1, "stage1")
            s2 = dict(sections["stage2"])
            s2["model"] = _build(ReconConfig, s2.get("model", {}), "stage2.model")
            s2["weights"] = _build(LossWeights, s2.get("weights", {}), "stage2.weights")
            stage2 = _build(Stage2Config, s2, "stage2")
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None
        return cls(data, stage1, stage2, d.get("dataset"), d.get("output"))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON ({e})") from None
        return cls.from_dict(raw)


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - fields)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown config field")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return cls(**values)
