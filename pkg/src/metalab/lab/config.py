"""Experiment configuration: a YAML document validated against a fixed schema.

Unknown keys anywhere are rejected. Every section is optional; omitted values
take the defaults below. Example::

    seed: 0
    out: runs/finite
    checkpoint: best
    benchmark:
      kind: fcnn            # fcnn | sinusoid
      sigma1: 1.0
      sigma2: 1.0
      widths: [1, 40, 40, 40, 1]
      activation: relu
    model:
      widths: [1, 40, 40, 40, 1]
      activation: relu
      batchnorm: true
    pool:
      mode: finite          # finite | infinite
      n_tasks: 200
      validation: fresh     # fresh | train
    inner: {steps: 1, lr: 0.1}
    outer: {adam_lr: 0.001, meta_batch_size: 75}
    train: {epochs: 2000, eval_every: 20}
    analysis: {n_episodes: 20, query_size: 100}
    sweep:
      sigma1: [1, 2, 4, 8, 16]
      inner_steps: [1, 2, 4, 8, 16, 32]
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from metalab.diffnet import NetSpec
from metalab.mamltrain import InnerConfig, OuterConfig, TrainConfig
from metalab.taskgen import DEFAULT_WIDTHS, BenchmarkParams, SinusoidParams


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _check_widths(widths: list[int]) -> list[int]:
    if len(widths) < 3 or any(w < 1 for w in widths):
        raise ValueError("widths need at least 3 positive entries")
    return widths


class BenchmarkSection(_Section):
    kind: Literal["fcnn", "sinusoid"] = "fcnn"
    mu1: float = 0.0
    sigma1: float = Field(1.0, ge=0)
    mu2: float = 0.0
    sigma2: float = Field(1.0, ge=0)
    widths: list[int] = list(DEFAULT_WIDTHS)
    activation: Literal["relu", "sigmoid", "identity"] = "relu"
    input_low: float = -1.0
    input_high: float = 1.0
    amplitude_range: tuple[float, float] = (0.1, 5.0)
    phase_range: tuple[float, float] = (0.0, math.pi)
    input_range: tuple[float, float] = (-5.0, 5.0)

    _widths = field_validator("widths")(_check_widths)

    def build(self, sigma1: float | None = None) -> BenchmarkParams | SinusoidParams:
        if self.kind == "sinusoid":
            return SinusoidParams(self.amplitude_range, self.phase_range, self.input_range)
        return BenchmarkParams(
            self.mu1,
            self.sigma1 if sigma1 is None else sigma1,
            self.mu2,
            self.sigma2,
            NetSpec(tuple(self.widths), self.activation),
            self.input_low,
            self.input_high,
        )


class ModelSection(_Section):
    widths: list[int] = list(DEFAULT_WIDTHS)
    activation: Literal["relu", "sigmoid", "identity"] = "relu"
    batchnorm: bool = True

    _widths = field_validator("widths")(_check_widths)

    def build(self) -> NetSpec:
        return NetSpec(tuple(self.widths), self.activation, self.batchnorm)


class PoolSection(_Section):
    mode: Literal["finite", "infinite"] = "finite"
    n_tasks: int = Field(200, ge=1)
    file: Optional[str] = None
    validation: Literal["fresh", "train"] = "fresh"


class InnerSection(_Section):
    steps: int = Field(1, ge=0)
    lr: float = Field(0.1, ge=0)
    first_order: bool = False

    def build(self) -> InnerConfig:
        return InnerConfig(self.steps, self.lr, self.first_order)


class OuterSection(_Section):
    adam_lr: float = Field(0.001, gt=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    meta_batch_size: int = Field(75, ge=1)

    def build(self) -> OuterConfig:
        return OuterConfig(self.adam_lr, self.beta1, self.beta2, self.eps, self.meta_batch_size)


class TrainSection(_Section):
    epochs: int = Field(2000, ge=0)
    eval_every: int = Field(20, ge=1)
    n_support: int = Field(5, ge=1)
    n_query: int = Field(15, ge=1)
    val_episodes: int = Field(100, ge=1)
    record_wall_time: bool = True

    def build(self) -> TrainConfig:
        return TrainConfig(
            self.epochs, self.eval_every, self.n_support, self.n_query, self.val_episodes, self.record_wall_time
        )


class AnalysisSection(_Section):
    n_episodes: int = Field(20, ge=1)
    query_size: int = Field(100, ge=2)
    n_support: Optional[int] = Field(None, ge=1)
    val_episodes: int = Field(100, ge=1)


class SweepSection(_Section):
    sigma1: list[float] = [1.0, 2.0, 4.0, 8.0, 16.0]
    inner_steps: list[int] = [1, 2, 4, 8, 16, 32]
    include_control: bool = False

    @field_validator("sigma1")
    @classmethod
    def _sigma_grid(cls, v):
        if not v or any(s < 0 for s in v):
            raise ValueError("sigma1 grid must be nonempty and nonnegative")
        return v

    @field_validator("inner_steps")
    @classmethod
    def _steps_grid(cls, v):
        if not v or any(s < 1 for s in v):
            raise ValueError("inner_steps must be nonempty with entries >= 1")
        return v


class ExperimentSpec(_Section):
    seed: int = 0
    out: str = "runs/default"
    checkpoint: Literal["best", "last"] = "best"
    benchmark: BenchmarkSection = BenchmarkSection()
    model: ModelSection = ModelSection()
    pool: PoolSection = PoolSection()
    inner: InnerSection = InnerSection()
    outer: OuterSection = OuterSection()
    train: TrainSection = TrainSection()
    analysis: AnalysisSection = AnalysisSection()
    sweep: SweepSection = SweepSection()

    @model_validator(mode="after")
    def _dims_agree(self):
        if self.benchmark.kind == "sinusoid":
            target_in, target_out = 1, 1
        else:
            target_in, target_out = self.benchmark.widths[0], self.benchmark.widths[-1]
            if not self.benchmark.input_low < self.benchmark.input_high:
                raise ValueError("benchmark input_low must be below input_high")
        if (self.model.widths[0], self.model.widths[-1]) != (target_in, target_out):
            raise ValueError("model input/output widths must match the benchmark")
        return self

    def with_overrides(self, **kw) -> "ExperimentSpec":
        kw = {k: v for k, v in kw.items() if v is not None}
        return self.model_copy(update=kw) if kw else self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def parse_config(data: dict | None) -> ExperimentSpec:
    try:
        return ExperimentSpec.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping at top level")
    return parse_config(data)
