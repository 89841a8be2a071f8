"""Strictly validated experiment configuration."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import ConfigError
from .losses import LossConfig
from .model import AFFINITY_VARIANTS, BackboneConfig
from .optim import OptimConfig
from .synthbench import BenchmarkConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    widths: Tuple[int, ...] = (8, 16, 16)
    feature_taps: Optional[Tuple[int, ...]] = None
    selector_hidden: int = Field(32, ge=0)
    mix_space: Literal["prob", "logit"] = "prob"


class LossSection(_Strict):
    gamma: float = Field(2.0, ge=0)
    tau: float = Field(1.0, gt=0)
    lambda_con: float = Field(1.0, ge=0)
    lambda_mix: float = Field(1.0, ge=0)
    lambda_acc: float = Field(1.0, ge=0)
    acc_loss_kind: Literal["L1", "MSE"] = "L1"


class OptimSection(_Strict):
    # Desk-scale defaults: the toy backbone needs a much larger step than 1e-4
    # to converge within the runtime budget.
    lr: float = Field(1e-2, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    decay_affinity: bool = False
    epochs_stage1: int = Field(60, ge=0)
    epochs_stage2: int = Field(200, ge=0)
    batch_size: int = Field(8, ge=1)


class ExperimentConfig(_Strict):
    task: Literal["segmentation", "classification"] = "segmentation"
    D: int = Field(12, ge=2)
    K: int = Field(4, ge=2)
    T: int = Field(3, ge=1)
    C: int = Field(3, ge=1)
    H: int = Field(16, ge=2)
    W: int = Field(16, ge=2)
    F: int = Field(4, ge=2)
    noise_sigma: float = Field(0.1, ge=0)
    train_frac: float = Field(2.0 / 3.0, gt=0, lt=1)
    val_frac: float = Field(1.0 / 6.0, gt=0, lt=1)
    samples_per_domain: int = Field(16, ge=1)
    jitter: bool = True
    model: ModelSection = ModelSection()
    loss: LossSection = LossSection()
    optim: OptimSection = OptimSection()
    affinity_variant: Literal["learned", "handcrafted", "d3g_style"] = "learned"
    pooling: Literal["spatiotemporal", "per_timestep"] = "spatiotemporal"
    seed: int = Field(0, ge=0, lt=2**64)
    out_dir: str = "runs"

    @model_validator(mode="after")
    def _check(self):
        if self.train_frac + self.val_frac >= 1:
            raise ValueError("train_frac + val_frac must be below 1")
        if self.task == "segmentation" and (self.H % 4 or self.W % 4):
            raise ValueError("segmentation H and W must be divisible by 4")
        if self.pooling == "per_timestep" and self.task != "segmentation":
            raise ValueError("per_timestep pooling needs the segmentation task")
        assert self.affinity_variant in AFFINITY_VARIANTS
        return self

    def benchmark(self) -> BenchmarkConfig:
        return BenchmarkConfig(
            task=self.task, D=self.D, K=self.K, T=self.T, C=self.C, H=self.H, W=self.W, F=self.F,
            noise_sigma=self.noise_sigma, train_frac=self.train_frac, val_frac=self.val_frac,
            samples_per_domain=self.samples_per_domain, jitter=self.jitter, seed=self.seed,
        )

    def backbone(self) -> BackboneConfig:
        in_ch = self.C if self.task == "segmentation" else self.F
        return BackboneConfig(
            task=self.task, in_channels=in_ch, n_classes=self.K, widths=tuple(self.model.widths),
            feature_taps=None if self.model.feature_taps is None else tuple(self.model.feature_taps),
            selector_hidden=self.model.selector_hidden, mix_space=self.model.mix_space,
        )

    def losses(self) -> LossConfig:
        return LossConfig(**self.loss.model_dump())

    def optimizer(self) -> OptimConfig:
        return OptimConfig(seed=self.seed, **self.optim.model_dump())

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        """Digest of everything except the output directory."""
        payload = self.model_dump(mode="json")
        payload.pop("out_dir")
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def updated(self, **changes) -> "ExperimentConfig":
        """Copy with nested ``section.field`` or top-level overrides, re-validated."""
        data = self.model_dump()
        for key, value in changes.items():
            section, _, name = key.rpartition(".")
            (data[section] if section else data)[name] = value
        return parse_config(data)


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config must be a JSON object, got {type(data).__name__}")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(data)
