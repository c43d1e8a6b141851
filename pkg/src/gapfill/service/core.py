"""Service layer: every endpoint and CLI subcommand funnels through these
functions, so local and remote execution behave identically."""

from __future__ import annotations

import os
import threading

import numpy as np

from .. import __version__
from ..config import BenchSettings, TrainSettings, parse_config_file, settings_from_dict
from ..data import mask_continuous, mask_random
from ..errors import ConfigError, UsageError
from ..workflows import (
    forecast_series_matrix,
    impute_series_matrix,
    run_bench,
    run_finetune,
    run_training,
)
from . import schemas as S

_cache_lock = threading.Lock()
_engine_cache: dict = {}
_CACHE_LIMIT = 8


def _cache_key(path):
    try:
        stat = os.stat(path)
        return (str(path), stat.st_mtime_ns, stat.st_size)
    except OSError:
        return (str(path), 0, 0)


def _cached(kind, path, loader):
    """Reload only when the file changes; weights are read-shared."""
    key = (kind,) + _cache_key(path)
    with _cache_lock:
        if key in _engine_cache:
            return _engine_cache[key]
    loaded = loader(path)
    with _cache_lock:
        if len(_engine_cache) >= _CACHE_LIMIT:
            _engine_cache.pop(next(iter(_engine_cache)))
        _engine_cache[key] = loaded
    return loaded


def health() -> S.HealthResponse:
    return S.HealthResponse(status="ok", version=__version__)


def make_mask(req: S.MaskRequest) -> S.MaskResponse:
    fn = mask_random if req.pattern == "random" else mask_continuous
    return S.MaskResponse(mask=[int(x) for x in fn(req.length, req.rate, req.seed)])


def _values_and_mask(values, extra_mask):
    arr = np.array(
        [[np.nan if cell is None else float(cell) for cell in row] for row in values],
        dtype=np.float64,
    )
    mask = None
    if extra_mask is not None:
        mask = np.asarray(extra_mask, dtype=np.float64)
    return arr, mask


def impute(req: S.ImputeRequest) -> S.ImputeResponse:
    from ..engine import Engine

    arr, mask = _values_and_mask(req.values, req.mask)
    engine = _cached("engine", req.checkpoint, Engine.load)
    imputed, observed = impute_series_matrix(
        engine, arr, mask=mask, domain=req.domain, prefix=req.prefix
    )
    names = req.variables or [f"v{i}" for i in range(imputed.shape[1])]
    if len(names) != imputed.shape[1]:
        raise ConfigError(f"{len(names)} variable names for {imputed.shape[1]} columns")
    return S.ImputeResponse(
        variables=names,
        imputed=[[float(x) for x in row] for row in imputed],
        observed_mask=[[int(x) for x in row] for row in observed],
    )


def forecast(req: S.ForecastRequest) -> S.ForecastResponse:
    from ..adaptation import load_forecaster

    arr = np.array([np.nan if v is None else float(v) for v in req.values])[:, None]
    mask = None if req.mask is None else np.asarray(req.mask, dtype=np.float64)[:, None]
    loaded = _cached("forecaster", req.checkpoint, load_forecaster)
    out = forecast_series_matrix(loaded, arr, mask=mask, horizon=req.horizon,
                                 domain=req.domain)
    return S.ForecastResponse(forecast=[float(x) for x in out[:, 0]])


def _merged_settings(cls, config_path, inline):
    values = {}
    if config_path:
        values.update(parse_config_file(config_path))
    if inline:
        values.update(inline)
    if not values:
        raise UsageError("either config_path or an inline config is required")
    return settings_from_dict(cls, values)


def train(req: S.TrainRequest) -> S.TrainResponse:
    settings = _merged_settings(TrainSettings, req.config_path, req.config)
    result = run_training(settings, req.out)
    return S.TrainResponse(
        checkpoint=result.checkpoint,
        epochs_run=result.epochs_run,
        best_val_mse=result.best_val_mse,
        best_epoch=result.best_epoch,
    )


def finetune(req: S.FinetuneRequest) -> S.FinetuneResponse:
    result = run_finetune(req.base, req.data, req.out, task=req.task,
                          horizon=req.horizon, domain=req.domain,
                          overrides=req.overrides)
    if req.task == "impute":
        val = result["history"][-1] if result["history"] else None
        return S.FinetuneResponse(artifact=result["prefix"], task="impute",
                                  steps=result["steps"], val_mse=val)
    val = result["history"][-1] if result["history"] else None
    return S.FinetuneResponse(artifact=result["checkpoint"], task="forecast",
                              steps=result["steps"], val_mse=val)


def bench(req: S.BenchRequest) -> S.BenchResponse:
    settings = _merged_settings(BenchSettings, req.config_path, req.config)
    report, paths = run_bench(settings, req.out_dir)
    return S.BenchResponse(
        csv=paths["csv"],
        jsonl=paths["jsonl"],
        cells=[S.BenchCellModel(model=c.model, pattern=c.pattern, rate=c.rate,
                                mse=c.mse, mae=c.mae, count=c.count)
               for c in report.cells],
        averages=report.averages,
    )
