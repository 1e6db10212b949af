"""Request and response bodies for the HTTP endpoints.

The service runs next to the data it operates on, so requests reference
filesystem paths rather than uploading payloads.  Every response that
writes files lists them under ``artifacts`` so callers can script against
the output without guessing names.
"""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class GenDataRequest(BaseModel):
    out_dir: str
    count: int = Field(ge=1)
    seed: int = 0
    height: int = Field(default=256, ge=16)
    width: int = Field(default=512, ge=16)
    objects: int = Field(default=6, ge=1)


class GenDataResponse(BaseModel):
    root: str
    train_ids: list[str]
    val_ids: list[str]
    artifacts: list[str]


class TrainRequest(BaseModel):
    data_dir: str
    out_dir: str
    config_path: Optional[str] = None
    preset: Optional[str] = None
    # key=value pairs applied on top of preset/config file, last wins
    overrides: dict[str, str] = Field(default_factory=dict)
    resume_from: Optional[str] = None


class TrainResponse(BaseModel):
    checkpoint: str
    history: str
    manifest: str
    artifacts: list[str]
    final_step: int
    initial_loss: float
    final_loss: float
    train_final_mae: float
    train_init_mae: float
    val_final_mae: float
    val_final_rmse: float
    elapsed_seconds: float


class SampleMetrics(BaseModel):
    scene_id: str
    mae: float
    rmse: float
    n_valid: int


class AggregateMetrics(BaseModel):
    mae: float
    rmse: float
    n_valid: int


class EvalRequest(BaseModel):
    data_dir: str
    checkpoint: Optional[str] = None
    split: str = "val"
    oracle: bool = False
    report_path: Optional[str] = None


class EvalResponse(BaseModel):
    split: str
    per_sample: list[SampleMetrics]
    per_sample_init: list[SampleMetrics]
    aggregate: AggregateMetrics
    aggregate_init: AggregateMetrics
    report: str
    artifacts: list[str]


class InferRequest(BaseModel):
    checkpoint: str
    sample_dir: str
    out_dir: str
    keep_prob: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    seed: Optional[int] = None


class InferResponse(BaseModel):
    artifacts: list[str]
    mae_final: float
    rmse_final: float
    mae_init: float
    rmse_init: float
    n_valid: int


class GradcheckRequest(BaseModel):
    scope: str = "all"
    seed: int = 0


class CheckRow(BaseModel):
    name: str
    max_rel_error: float
    tolerance: float
    passed: bool


class GradcheckResponse(BaseModel):
    ok: bool
    checks: list[CheckRow]


class HealthResponse(BaseModel):
    status: str
    version: str


class ErrorBody(BaseModel):
    kind: str  # usage | io | verification
    message: str
