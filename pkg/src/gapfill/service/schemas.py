"""Pydantic request/response models for the HTTP surface."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class MaskRequest(BaseModel):
    length: int = Field(gt=0)
    rate: float
    pattern: Literal["random", "continuous"] = "random"
    seed: int = 0


class MaskResponse(BaseModel):
    mask: list[int]


class ImputeRequest(BaseModel):
    """Inline series payload; null values mark missing points."""

    checkpoint: str
    prefix: Optional[str] = None
    domain: Optional[str] = None
    variables: Optional[list[str]] = None
    values: list[list[Optional[float]]]  # T rows x V columns
    mask: Optional[list[list[int]]] = None  # extra mask, 0 = treat as missing


class ImputeResponse(BaseModel):
    variables: list[str]
    imputed: list[list[float]]
    observed_mask: list[list[int]]


class ForecastRequest(BaseModel):
    checkpoint: str
    domain: Optional[str] = None
    horizon: Optional[int] = None  # must equal the checkpoint's trained horizon
    values: list[Optional[float]]
    mask: Optional[list[int]] = None


class ForecastResponse(BaseModel):
    forecast: list[float]


class TrainRequest(BaseModel):
    out: str
    config_path: Optional[str] = None
    config: Optional[dict] = None  # inline settings override/instead of the file


class TrainResponse(BaseModel):
    checkpoint: str
    epochs_run: int
    best_val_mse: float
    best_epoch: int


class FinetuneRequest(BaseModel):
    base: str
    data: list[str]
    out: str
    task: Literal["impute", "forecast"] = "impute"
    horizon: int = 1
    domain: Optional[str] = None
    overrides: dict = Field(default_factory=dict)


class FinetuneResponse(BaseModel):
    artifact: str
    task: str
    steps: int
    val_mse: Optional[float] = None


class BenchRequest(BaseModel):
    out_dir: str
    config_path: Optional[str] = None
    config: Optional[dict] = None


class BenchCellModel(BaseModel):
    model: str
    pattern: str
    rate: float
    mse: float
    mae: float
    count: int


class BenchResponse(BaseModel):
    csv: str
    jsonl: str
    cells: list[BenchCellModel]
    averages: dict


class ErrorBody(BaseModel):
    error: str
    kind: Literal["usage", "data", "numeric"]
    detail: str
