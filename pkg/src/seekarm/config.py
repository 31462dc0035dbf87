"""Experiment configuration documents (YAML or JSON).

Every section and field is optional; omitted values take the defaults of
the model classes below. Unknown keys are rejected and validation errors
name the offending field by dotted path.
"""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__, scenes
from .cem import CemConfig
from .env import DomainRandomizationConfig, PerturbationConfig, Scene
from .errors import ConfigError
from .policy import PolicyConfig
from .ppo import PpoConfig
from .reward import CurriculumSchedule, RewardWeights

CELLS = ("full", "no-DR", "no-TE")


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class SceneSection(_Section):
    name: Literal["reach3", "drawer"] = "reach3"
    horizon: int | None = Field(None, ge=1, description="episode length in control steps; preset default if omitted")

    def build(self) -> Scene:
        builder = scenes.PRESETS[self.name]
        return builder() if self.horizon is None else builder(horizon=self.horizon)


class RewardSection(_Section):
    weights: RewardWeights = RewardWeights()
    curriculum: CurriculumSchedule | None = Field(None, description="explicit phases; default ramps actuation penalties from 10%")

    def schedule(self) -> CurriculumSchedule:
        return self.curriculum or CurriculumSchedule.default(self.weights)


class PolicySection(_Section):
    """Architecture choices; joint count, bounds and input scaling come from the scene."""

    layers: int = Field(6, ge=1)
    heads: int = Field(3, ge=1)
    width: int = Field(48, ge=1)
    ff_width: int | None = None
    head_hidden: int = Field(64, ge=1)
    encoding: Literal["trig", "raw"] = "trig"
    history: int = Field(1, ge=1, le=4)
    log_std_init: float = -0.7

    def build(self, scene: Scene, half_width: float, encoding: str | None = None) -> PolicyConfig:
        fields = self.model_dump()
        if encoding is not None:
            fields["encoding"] = encoding
        return PolicyConfig.for_scene(scene, half_width, **fields)


class CemSection(CemConfig):
    objective: Literal["actuator", "synthetic"] = "actuator"
    synthetic_optimum: tuple[float, float, float] | None = Field(None, description="x* of the synthetic landscape; defaults to the scene's affordance point")
    synthetic_noise: float = Field(0.0, ge=0.0)
    initial_mean: tuple[float, ...] | None = Field(None, description="defaults to the scene's initial keypoint guess")

    def search(self) -> CemConfig:
        return CemConfig(**{k: getattr(self, k) for k in CemConfig.model_fields})


class HarnessSection(_Section):
    dr: DomainRandomizationConfig = DomainRandomizationConfig()
    perturbation: PerturbationConfig = PerturbationConfig()
    cells: tuple[Literal["full", "no-DR", "no-TE"], ...] = CELLS
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    trials: int = Field(20, ge=0)
    hold_steps: int = Field(10, ge=1, description="reach success: steps the end-effector must stay within 2 cm")
    reach_tolerance: float = Field(0.02, gt=0.0)
    open_fraction: float = Field(0.8, gt=0.0, le=1.0, description="drawer success: articulation >= this fraction of travel")

    @model_validator(mode="after")
    def _unique(self):
        if len(set(self.cells)) != len(self.cells):
            raise ValueError("cells must not repeat")
        return self


class ExperimentConfig(_Section):
    scene: SceneSection = SceneSection()
    reward: RewardSection = RewardSection()
    policy: PolicySection = PolicySection()
    ppo: PpoConfig = PpoConfig()
    cem: CemSection = CemSection()
    harness: HarnessSection = HarnessSection()

    def to_document(self) -> dict:
        return self.model_dump(mode="json")

    def fingerprint(self) -> str:
        """sha256 over the canonical JSON of every field."""
        return hashlib.sha256(canonical_json(self.to_document()).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _field_path(err: dict) -> str:
    return ".".join(str(p) for p in err["loc"])


def validate(document) -> ExperimentConfig:
    if document is None:
        document = {}
    if not isinstance(document, dict):
        raise ConfigError("top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as exc:
        errs = exc.errors()
        first = errs[0]
        detail = "; ".join(f"{_field_path(e) or '<root>'}: {e['msg']}" for e in errs)
        raise ConfigError(detail, _field_path(first)) from None


def loads(text: str) -> ExperimentConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML/JSON: {exc}") from None
    return validate(doc)


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}", str(path)) from None
    return loads(text)


def dumps(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_document(), sort_keys=True)


def save(config: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(config))


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("seekarm.presets").iterdir() if p.name.endswith(".yaml"))


def load_preset(name: str) -> ExperimentConfig:
    res = resources.files("seekarm.presets") / f"{name}.yaml"
    if not res.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return loads(res.read_text())


def provenance(config: ExperimentConfig) -> dict:
    return {"version": __version__, "config_fingerprint": config.fingerprint()}
