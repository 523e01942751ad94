"""Run configuration: one validated JSON document drives every command."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .decoder import DecoderConfig
from .geometry import CameraRig
from .voxel_grid import GridSpec


class GridSettings(BaseModel):
    """Full-resolution ground-truth grid geometry."""

    model_config = ConfigDict(extra="forbid")

    dims: tuple[int, int, int] = (32, 32, 8)
    voxel_size: float = Field(default=0.2, gt=0)
    origin: tuple[float, float, float] = (0.0, -3.2, -0.8)

    @model_validator(mode="after")
    def _check(self) -> "GridSettings":
        if any(d < 2 or d % 2 for d in self.dims):
            raise ValueError("grid dims must be even and >= 2")
        return self

    def to_spec(self) -> GridSpec:
        return GridSpec(
            dims=self.dims, voxel_size=self.voxel_size, origin=self.origin
        )


class CameraSettings(BaseModel):
    """Pinhole intrinsics; the sensor-to-camera pose uses the KITTI axes."""

    model_config = ConfigDict(extra="forbid")

    width: int = Field(default=64, ge=1)
    height: int = Field(default=48, ge=1)
    fx: float = Field(default=40.0, gt=0)
    fy: float = Field(default=40.0, gt=0)
    cx: float = 31.5
    cy: float = 23.5

    def to_rig(self) -> CameraRig:
        return CameraRig.from_intrinsics(
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )


class DecoderSettings(BaseModel):
    """Decoder hyperparameters at demo scale."""

    model_config = ConfigDict(extra="forbid")

    channels: int = Field(default=16, ge=1)
    num_queries: int = Field(default=8, ge=1)
    num_iters: int = Field(default=2, ge=0)
    unet_scales: int = Field(default=2, ge=2)
    heads: int = Field(default=4, ge=1)
    points: int = Field(default=4, ge=1)
    feature_levels: int = Field(default=2, ge=1)

    def to_decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            channels=self.channels,
            num_queries=self.num_queries,
            num_iters=self.num_iters,
            unet_scales=self.unet_scales,
            heads=self.heads,
            points=self.points,
            feature_levels=self.feature_levels,
        )


class RunConfig(BaseModel):
    """Validated configuration document; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")

    grid: GridSettings = Field(default_factory=GridSettings)
    camera: CameraSettings = Field(default_factory=CameraSettings)
    decoder: DecoderSettings = Field(default_factory=DecoderSettings)
    num_classes: int = Field(default=8, ge=2)
    class_names: list[str] | None = None
    remap_path: str | None = None
    lambda1: float = Field(default=1.0, ge=0)
    lambda2: float = Field(default=0.3, ge=0)
    k: int = Field(default=15000, ge=0)
    selection_rule: Literal["learned", "entropy"] = "learned"
    seed: int = 0
    synthetic_heterogeneity: float = Field(default=0.1, ge=0.0, le=1.0)
    proposal_dilation: int = Field(default=0, ge=0)
    hard_low_targets: bool = False
    dump_features: bool = False

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ValueError(
                f"class_names has {len(self.class_names)} entries for "
                f"{self.num_classes} classes"
            )
        low = [d // 2 for d in self.grid.dims]
        div = 2 ** (self.decoder.unet_scales - 1)
        if any(d % div for d in low):
            raise ValueError(
                f"half-resolution dims {tuple(low)} not divisible by {div}"
            )
        return self


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a JSON config file."""
    text = Path(path).read_text()
    return RunConfig.model_validate(json.loads(text))
