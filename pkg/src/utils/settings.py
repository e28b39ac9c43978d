"""Flat JSON run configuration shared by every CLI command.

The run file is a single key/value object, validated up front by ``RunConfig``
and projected into the typed per-module configs. Relative paths resolve
against the working directory given on the command line.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..tools.image_model import validate_image_size
from ..tools.losses import LossConfig
from ..tools.message_codec import EccConfig
from ..tools.network import NetworkSpec
from ..tools.steganalyzer import DetectorSpec
from ..tools.style_reference import DEFAULT_GAMMA, DEFAULT_MATRIX, StyleGroundTruthSource, TransformParams
from ..tools.trainer import TrainConfig
from .errors import ConfigurationError


class RunConfig(BaseModel):
    """Every knob of a run; unknown keys are rejected by name."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # data
    dataset_dir: str = "data/images"
    output_dir: str = "runs/default"
    image_size: int = 128
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0
    ingest_concurrency: int = Field(8, ge=1)

    # network
    down_channels: Optional[tuple[int, ...]] = None

    # training
    epochs: int = Field(1, ge=0)
    learning_rate: float = Field(1e-4, gt=0)
    adam_beta1: float = Field(0.9, gt=0, lt=1)
    adam_beta2: float = Field(0.999, gt=0, lt=1)
    batch_size: int = Field(1, ge=1)
    block_size: int = Field(8, ge=1)
    noise_sigmas: tuple[float, ...] = ()
    seed: int = 0
    checkpoint_interval: int = Field(0, ge=0)
    tasks: Literal["joint", "style_only", "hiding_only"] = "joint"
    bit_encoding: Literal["symmetric", "binary"] = "symmetric"
    device: str = "cpu"

    # losses
    loss_norm: Literal["l1", "l2"] = "l1"
    alpha1: float = Field(1.0, gt=0)
    alpha2: float = Field(1.0, gt=0)

    # error correction
    ecc_scheme: Literal["none", "reed_solomon"] = "none"
    rs_n: int = 255
    rs_k: int = 223

    # style ground truth
    style_mode: Literal["builtin", "external_directory"] = "builtin"
    style_matrix: tuple[tuple[float, float, float], tuple[float, float, float], tuple[float, float, float]] = DEFAULT_MATRIX
    style_gamma: tuple[float, float, float] = DEFAULT_GAMMA
    ground_truth_dir: Optional[str] = None
    style_image_path: Optional[str] = None

    # evaluation
    sweep_als: tuple[int, ...] = (64, 256, 1024, 4096, 16384)
    eval_sigmas: tuple[float, ...] = (0.0, 0.01, 0.05, 0.1, 0.15)
    random_trigger_trials: int = Field(100, ge=1)
    eval_seed: int = 0

    # steganalysis
    detect_als: tuple[int, ...] = (256, 4096, 16384)
    detector_widths: tuple[int, int, int, int] = (8, 16, 32, 64)
    detector_epochs: int = Field(30, ge=1)
    detector_learning_rate: float = Field(1e-3, gt=0)
    detector_batch_size: int = Field(16, ge=1)

    @model_validator(mode="after")
    def _check_geometry(self) -> "RunConfig":
        s = validate_image_size(self.image_size)
        if s % self.block_size:
            raise ValueError(f"block_size N={self.block_size} must divide image_size S={s}")
        # the projections carry their own invariants; surface them now
        self.network_spec()
        self.ecc_config()
        source = self.style_source()
        if source.mode == "builtin":
            source.check()
        elif not source.ground_truth_dir or not source.style_image_path:
            raise ValueError("style_mode external_directory needs ground_truth_dir and style_image_path")
        return self

    # -- projections --------------------------------------------------
    def network_spec(self) -> NetworkSpec:
        fields = {"image_size": self.image_size}
        if self.down_channels:
            fields["down_channels"] = self.down_channels
        return NetworkSpec(**fields)

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha1=self.alpha1, alpha2=self.alpha2, norm=self.loss_norm)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            batch_size=self.batch_size,
            epochs=self.epochs,
            block_size=self.block_size,
            loss=self.loss_config(),
            noise_sigmas=self.noise_sigmas,
            seed=self.seed,
            checkpoint_interval=self.checkpoint_interval,
            tasks=self.tasks,
            bit_encoding=self.bit_encoding,
            device=self.device,
        )

    def ecc_config(self) -> EccConfig:
        return EccConfig(scheme=self.ecc_scheme, rs_n=self.rs_n, rs_k=self.rs_k)

    def style_source(self) -> StyleGroundTruthSource:
        return StyleGroundTruthSource(
            mode=self.style_mode,
            transform=TransformParams(matrix=self.style_matrix, gamma=self.style_gamma),
            ground_truth_dir=self.ground_truth_dir,
            style_image_path=self.style_image_path,
        )

    def detector_spec(self) -> DetectorSpec:
        return DetectorSpec(
            widths=self.detector_widths,
            learning_rate=self.detector_learning_rate,
            epochs=self.detector_epochs,
            batch_size=self.detector_batch_size,
            seed=self.seed,
            device=self.device,
        )


def _describe(exc: ValidationError) -> str:
    parts = []
    for error in exc.errors():
        key = ".".join(str(p) for p in error["loc"]) or "config"
        parts.append(f"{key}: {error['msg']}")
    return "; ".join(parts)


def load_run_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Read and validate a run file; *overrides* (e.g. from CLI flags) win over file values."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"run configuration not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path} must hold a JSON object of key/value pairs")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig(**data)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid run configuration: {_describe(exc)}") from exc


def resolve(workdir: str | Path, path: str | Path) -> Path:
    """Relative run-file paths are anchored at *workdir*."""
    path = Path(path)
    return path if path.is_absolute() else Path(workdir) / path
