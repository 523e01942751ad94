"""Request and response models of the HTTP service."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

from ..config import RunConfig


class StatsRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data_dir: str
    levels: int = Field(default=2, ge=1)
    dims: tuple[int, int, int] = (256, 256, 32)
    voxel_size: float = Field(default=0.2, gt=0)
    remap_path: str | None = None
    workers: int = Field(default=1, ge=1)


class StatsResponse(BaseModel):
    status: Literal["ok", "partial"]
    num_frames: int
    rows: list[dict]
    failures: list[dict]
    csv_text: str


class EvalRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pred_dir: str
    gt_dir: str
    dims: tuple[int, int, int] = (256, 256, 32)
    voxel_size: float = Field(default=0.2, gt=0)
    num_classes: int | None = None
    remap_path: str | None = None
    use_remap: bool = True
    class_names: list[str] | None = None
    workers: int = Field(default=1, ge=1)


class EvalResponse(BaseModel):
    status: Literal["ok", "partial"]
    metrics: dict
    table: str
    frames_evaluated: list[str]
    skipped: list[str]


class GradcheckRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    trials: int = Field(default=100, ge=1)
    corrupt: str | None = None


class GradcheckResponse(BaseModel):
    status: Literal["ok", "partial"]
    all_passed: bool
    rows: list[dict]


class DemoRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: RunConfig = Field(default_factory=RunConfig)
    out_dir: str
    seed: int | None = None
    k: int | None = Field(default=None, ge=0)
    rule: Literal["learned", "entropy"] | None = None


class DemoResponse(BaseModel):
    status: Literal["ok"]
    summary: dict


class BenchRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: int = Field(default=15000, ge=0)
    dims: tuple[int, int, int] = (256, 256, 32)
    channels: int = Field(default=32, ge=1)
    num_classes: int = Field(default=20, ge=2)


class BenchResponse(BaseModel):
    status: Literal["ok"]
    report: dict


class HealthResponse(BaseModel):
    status: Literal["ok"]
    version: str
