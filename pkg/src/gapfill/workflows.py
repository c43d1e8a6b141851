"""End-to-end workflows behind the service endpoints and CLI subcommands."""

from __future__ import annotations

import os

import numpy as np

from .adaptation import (
    finetune_loop,
    forecast,
    forecast_finetune,
    forecast_pairs,
    inference_prefix,
    load_forecaster,
    load_prefix,
)
from .backbone import BackboneConfig
from .bench import ProtocolConfig, render_report, run_protocol
from .config import BenchSettings, TrainSettings
from .data import load_csv, qualify, slice_windows, split_by_variable
from .engine import Engine
from .errors import ConfigError, DataError
from .training import TrainConfig, train_loop


def _load_datasets(paths, domains=None):
    domains = domains or []
    series = []
    for i, path in enumerate(paths):
        label = domains[i] if i < len(domains) else None
        series.append(load_csv(path, domain=label))
    return series


def _split_windows(series_list, settings: TrainSettings):
    train_w, val_w = [], []
    splits = {}
    for series in series_list:
        tr, va, te = split_by_variable(series.variables, settings.split_ratios,
                                       settings.split_seed)
        splits[series.domain] = {
            "train": [qualify(series.domain, v) for v in sorted(tr)],
            "val": [qualify(series.domain, v) for v in sorted(va)],
            "test": [qualify(series.domain, v) for v in sorted(te)],
        }
        train_w.extend(slice_windows(series, settings.window_length, settings.stride,
                                     variables=sorted(tr)))
        val_w.extend(slice_windows(series, settings.window_length, settings.stride,
                                   variables=sorted(va)))
    return train_w, val_w, splits


def run_training(settings: TrainSettings, out_path, datasets=None):
    """Train a fresh one-for-all model; returns the TrainResult."""
    series_list = datasets if datasets is not None else _load_datasets(
        settings.data, settings.domains)
    if not series_list:
        raise ConfigError("no training datasets configured")
    train_w, val_w, splits = _split_windows(series_list, settings)
    if settings.max_train_windows and len(train_w) > settings.max_train_windows:
        rng = np.random.default_rng(settings.seed)
        keep = rng.permutation(len(train_w))[: settings.max_train_windows]
        train_w = [train_w[i] for i in sorted(keep)]
    domains = [s.domain for s in series_list] if settings.domain_mode == "per_domain" else []
    cfg = BackboneConfig(
        layers=settings.layers, heads=settings.heads, width=settings.width,
        window_length=settings.window_length, patch_length=settings.patch_length,
        ffn_width=settings.ffn_width, dropout=settings.dropout,
        max_seq=settings.max_seq, domains=domains,
    )
    engine = Engine.create(cfg, seed=settings.seed, precision=settings.precision)
    tcfg = TrainConfig(
        alpha=settings.alpha, lr=settings.lr, batch_size=settings.batch_size,
        epochs=settings.epochs, patience=settings.patience,
        mask_rate_min=settings.mask_rate_min, mask_rate_max=settings.mask_rate_max,
        val_rate=settings.val_rate, seed=settings.seed,
        precision=settings.precision,
        log_path=settings.log_path or f"{out_path}.log.jsonl",
    )
    meta = {
        "train_variables": sorted(v for s in splits.values() for v in s["train"]),
        "val_variables": sorted(v for s in splits.values() for v in s["val"]),
        "test_variables": sorted(v for s in splits.values() for v in s["test"]),
        "splits": splits,
        "task": "impute",
        "seed": settings.seed,
    }
    return train_loop(engine, train_w, val_w, tcfg, out_path, meta=meta)


def run_finetune(base, data_paths, out_path, task="impute", horizon=1,
                 domain=None, overrides=None, datasets=None):
    """Domain fine-tune (prefix sidecar) or forecasting conversion."""
    overrides = dict(overrides or {})
    settings_keys = ("lr", "batch_size", "epochs", "patience", "alpha",
                     "mask_rate_min", "mask_rate_max", "val_rate", "seed")
    bad = sorted(set(overrides) - set(settings_keys) - {
        "window_length", "stride", "split_ratios", "split_seed"})
    if bad:
        raise ConfigError(f"unknown finetune overrides: {', '.join(bad)}")
    meta = Engine.read_meta(base)
    window_length = int(overrides.pop("window_length", meta["model"]["window_length"]))
    stride = int(overrides.pop("stride", 1))
    split_ratios = overrides.pop("split_ratios", (1, 1, 1))
    split_seed = int(overrides.pop("split_seed", 0))
    # fine-tuning reconstructs against the frozen base; contrastive pressure
    # on the frozen bilinear head buys nothing, so alpha defaults to 0 here
    overrides.setdefault("alpha", 0.0)
    tcfg = TrainConfig(**overrides)

    series_list = datasets if datasets is not None else _load_datasets(data_paths)
    if not series_list:
        raise ConfigError("no fine-tuning datasets configured")

    if task == "impute":
        train_w, val_w = [], []
        for series in series_list:
            tr, va, _ = split_by_variable(series.variables, split_ratios, split_seed)
            train_w.extend(slice_windows(series, window_length, stride, variables=sorted(tr)))
            val_w.extend(slice_windows(series, window_length, stride, variables=sorted(va)))
        return finetune_loop(base, train_w, val_w, tcfg, out_path, domain=domain)
    if task == "forecast":
        pairs = []
        for series in series_list:
            tr, _, _ = split_by_variable(series.variables, split_ratios, split_seed)
            pairs.extend(forecast_pairs(series, window_length,
                                        horizon * meta["model"]["patch_length"],
                                        stride=stride, variables=sorted(tr)))
        return forecast_finetune(base, pairs, tcfg, out_path, horizon=horizon,
                                 domain=domain)
    raise ConfigError(f"unknown finetune task {task!r}")


def impute_series_matrix(checkpoint, values, mask=None, domain=None, prefix=None):
    """Impute a T x V matrix by windowing each variable.

    `values` may contain NaN at missing positions (combined with `mask` when
    given).  Windows advance by the model's window length; a short tail is
    covered by one final overlapping window.  Series shorter than one window
    are a data error.
    """
    engine = checkpoint if isinstance(checkpoint, Engine) else Engine.load(checkpoint)
    length = engine.cfg.window_length
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    nan_mask = (~np.isnan(values)).astype(np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim == 1:
            mask = mask[:, None]
        if mask.shape != values.shape:
            raise DataError(f"mask shape {mask.shape} != values shape {values.shape}")
        full_mask = nan_mask * mask
    else:
        full_mask = nan_mask
    t, v = values.shape
    if t < length:
        raise DataError(f"series length {t} shorter than window length {length}")
    values = np.nan_to_num(values, nan=0.0)

    prefix_kv = None
    if prefix:
        prefix_kv = inference_prefix(engine, load_prefix(prefix), domain)

    starts = list(range(0, t - length + 1, length))
    if starts[-1] != t - length:
        starts.append(t - length)
    out = values.copy()
    for col in range(v):
        for s in starts:
            seg = slice(s, s + length)
            vals = values[seg, col] * full_mask[seg, col]
            composed, _, _ = engine.impute_window(vals, full_mask[seg, col], domain=domain,
                                                  prefix=prefix_kv)
            missing = full_mask[seg, col] == 0
            out[seg, col] = np.where(missing, composed, out[seg, col])
    return out, full_mask


def forecast_series_matrix(checkpoint, values, mask=None, horizon=None, domain=None):
    """Forecast horizon*P future points for each column from its last window."""
    if isinstance(checkpoint, tuple):
        engine, bundle, head, trained_h = checkpoint
    else:
        engine, bundle, head, trained_h = load_forecaster(checkpoint)
    if horizon is not None and int(horizon) != trained_h:
        raise ConfigError(
            f"horizon {horizon} does not match the checkpoint's trained horizon {trained_h}"
        )
    length = engine.cfg.window_length
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    nan_mask = (~np.isnan(values)).astype(np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim == 1:
            mask = mask[:, None]
        nan_mask = nan_mask * mask
    t, v = values.shape
    if t < length:
        raise DataError(f"series length {t} shorter than window length {length}")
    values = np.nan_to_num(values, nan=0.0)
    out = np.zeros((trained_h * engine.cfg.patch_length, v))
    for col in range(v):
        seg_vals = values[t - length :, col]
        seg_mask = nan_mask[t - length :, col]
        out[:, col] = forecast(engine, bundle, head, seg_vals * seg_mask, seg_mask,
                               domain=domain)
    return out


def run_bench(settings: BenchSettings, out_dir, datasets=None):
    cfg = ProtocolConfig(
        data=datasets if datasets is not None else list(settings.data),
        checkpoint=settings.checkpoint or None,
        prefix=settings.prefix or None,
        models=list(settings.models),
        rates=list(settings.rates),
        patterns=list(settings.patterns),
        window_length=settings.window_length,
        stride=settings.stride,
        split_ratios=settings.split_ratios,
        split_seed=settings.split_seed,
        mask_seed=settings.mask_seed,
        metric_space=settings.metric_space,
        out_dir=str(out_dir),
    )
    report = run_protocol(cfg)
    paths = render_report(report, out_dir)
    return report, paths


def write_csv_matrix(path, values, header, mask=None):
    """CSV writer matching the load_csv contract (empty cell = missing)."""
    values = np.asarray(values)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row_i in range(values.shape[0]):
            cells = []
            for col_i in range(values.shape[1]):
                if mask is not None and mask[row_i, col_i] == 0:
                    cells.append("")
                else:
                    cells.append(repr(float(values[row_i, col_i])))
            fh.write(",".join(cells) + "\n")
