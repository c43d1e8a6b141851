"""FastAPI application wrapping the service layer."""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..errors import GapfillError
from . import core
from . import schemas as S

app = FastAPI(title="gapfill", description="incomplete time series imputation service")

_KINDS = {1: "usage", 2: "data", 3: "numeric"}
_STATUS = {1: 400, 2: 422, 3: 500}


@app.exception_handler(GapfillError)
async def gapfill_error_handler(request: Request, exc: GapfillError):
    code = getattr(exc, "exit_code", 1)
    body = S.ErrorBody(error=type(exc).__name__, kind=_KINDS.get(code, "usage"),
                       detail=str(exc))
    return JSONResponse(status_code=_STATUS.get(code, 400), content=body.model_dump())


@app.get("/health", response_model=S.HealthResponse)
def health():
    return core.health()


@app.post("/mask", response_model=S.MaskResponse)
def make_mask(req: S.MaskRequest):
    return core.make_mask(req)


@app.post("/impute", response_model=S.ImputeResponse)
def impute(req: S.ImputeRequest):
    return core.impute(req)


@app.post("/forecast", response_model=S.ForecastResponse)
def forecast(req: S.ForecastRequest):
    return core.forecast(req)


@app.post("/train", response_model=S.TrainResponse)
def train(req: S.TrainRequest):
    # synchronous by design: desk-scale corpora finish in minutes; callers
    # should use a generous client timeout
    return core.train(req)


@app.post("/finetune", response_model=S.FinetuneResponse)
def finetune(req: S.FinetuneRequest):
    return core.finetune(req)


@app.post("/bench", response_model=S.BenchResponse)
def bench(req: S.BenchRequest):
    return core.bench(req)
