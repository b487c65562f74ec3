"""Experiment configuration: one JSON document, validated before any compute."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .model import ACTIVATIONS, FEATURE_KINDS
from .trainer import MONITORS


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Synthetic(_Strict):
    N: int = Field(8, ge=1)
    d: int = Field(2, ge=1)
    d_prime: int = Field(1, ge=1)
    ball_radius: float = Field(1.0, gt=0)
    min_separation: float = Field(0.0, ge=0)
    seed: int = 0


class DatasetSpec(_Strict):
    csv: Optional[str] = None
    input_dim: Optional[int] = Field(None, ge=1)
    synthetic: Optional[Synthetic] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.csv is None) == (self.synthetic is None):
            raise ValueError("dataset needs exactly one of 'csv' or 'synthetic'")
        return self


class FeatureSpec(_Strict):
    kind: str = "gaussian"
    rho: Optional[float] = Field(None, gt=0)
    nu: Optional[float] = None
    radius: Optional[float] = Field(None, gt=0)
    scale: Optional[float] = Field(None, gt=0)

    @field_validator("kind")
    @classmethod
    def _kind(cls, v):
        if v not in FEATURE_KINDS:
            raise ValueError(f"feature kind must be one of {FEATURE_KINDS}")
        return v

    def as_mapping(self) -> dict:
        return {k: v for k, v in self.model_dump().items() if v is not None}


class InitSpec(_Strict):
    kind: Literal["fixup", "random"] = "fixup"
    features: FeatureSpec = FeatureSpec()
    scale: float = Field(1.0, gt=0)
    tied_slices: bool = False


class ModelSpec(_Strict):
    S: int = Field(16, ge=1)
    m: int = Field(64, ge=1)
    activation: str = "cos"
    init: InitSpec = InitSpec()
    seed: int = 0

    @field_validator("activation")
    @classmethod
    def _act(cls, v):
        if v not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        return v


class TrainerSpec(_Strict):
    eta0: float = Field(1e-2, gt=0)
    t_max: float = Field(1.0, gt=0)
    adaptive: bool = True
    monitors: list[str] = sorted(MONITORS)
    checkpoint_every: int = Field(0, ge=0)
    distance_every: int = Field(0, ge=0)
    max_steps: int = Field(1_000_000, ge=1)
    seed: int = 0

    @field_validator("monitors")
    @classmethod
    def _monitors(cls, v):
        unknown = set(v) - MONITORS
        if unknown:
            raise ValueError(f"unknown monitors {sorted(unknown)}")
        return v


class LiftSpec(_Strict):
    enabled: bool = False
    alpha: Union[float, Literal["auto"]] = 1.0
    budget: int = Field(20, ge=0)

    @field_validator("alpha")
    @classmethod
    def _alpha(cls, v):
        if v != "auto" and not v > 0:
            raise ValueError("alpha must be positive or 'auto'")
        return v


class CertifySpec(_Strict):
    n_directions: int = Field(32, ge=1)
    probe_seed: int = 0


class OutputSpec(_Strict):
    dir: str = "runs/default"
    formats: list[Literal["csv", "jsonl"]] = ["jsonl", "csv"]


class ExperimentConfig(_Strict):
    dataset: DatasetSpec
    model: ModelSpec = ModelSpec()
    trainer: TrainerSpec = TrainerSpec()
    lift: LiftSpec = LiftSpec()
    certify: CertifySpec = CertifySpec()
    outputs: OutputSpec = OutputSpec()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


class ConfigError(ValueError):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, assignment: str) -> None:
    """Apply ``dotted.path=value`` in place; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form path=value")
    path, value = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = raw
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {path!r} descends into a non-object")
        node = child
    node[keys[-1]] = _parse_value(value)


def load_config(path: str | Path | None, overrides: list[str] = ()) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    for item in overrides:
        apply_override(raw, item)
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
