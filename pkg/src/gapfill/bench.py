"""Baselines, metrics, and the variable-wise evaluation protocol.

Datasets are split by variable (never by time); test variables are windowed,
artificially masked per (pattern, rate) cell with seeds derived from stable
content hashes, imputed by every configured model, and scored only on the
artificially hidden, natively observed positions.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .data import (
    MultivariateSeries,
    compose_masks,
    eval_positions,
    load_csv,
    mask_continuous,
    mask_random,
    qualify,
    revin_normalize,
    slice_windows,
    split_by_variable,
)
from .engine import Engine
from .errors import ConfigError, UndefinedMetricError

PATTERNS = ("random", "continuous")


# ---------------------------------------------------------------------------
# naive baselines


def impute_median(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Missing positions take the median of the window's observed values."""
    values = np.asarray(values, dtype=np.float64)
    observed = np.asarray(mask) > 0
    if not observed.any():
        return np.zeros_like(values)
    fill = float(np.median(values[observed]))
    return np.where(observed, values, fill)


def impute_last(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Forward-fill from the most recent observation; leading gaps take the
    first observed value; a fully missing window becomes zeros."""
    values = np.asarray(values, dtype=np.float64)
    observed = np.asarray(mask) > 0
    if not observed.any():
        return np.zeros_like(values)
    out = values.copy()
    first_seen = int(np.argmax(observed))
    last = values[first_seen]
    for i in range(len(values)):
        if observed[i]:
            last = values[i]
        else:
            out[i] = last if i > first_seen else values[first_seen]
    return out


def metric_mse_mae(imputed, truth, eval_mask):
    """(MSE, MAE, count) over the evaluation positions."""
    sel = np.asarray(eval_mask) > 0
    count = int(sel.sum())
    if count == 0:
        raise UndefinedMetricError("metric over an empty evaluation mask")
    err = np.asarray(imputed, dtype=np.float64)[sel] - np.asarray(truth, dtype=np.float64)[sel]
    return float((err**2).mean()), float(np.abs(err).mean()), count


# ---------------------------------------------------------------------------
# protocol config / report


@dataclass
class ProtocolConfig:
    data: list  # csv paths
    checkpoint: str | None = None
    prefix: str | None = None
    models: list = field(default_factory=lambda: ["engine", "median", "last"])
    rates: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 10)])
    patterns: list = field(default_factory=lambda: list(PATTERNS))
    window_length: int = 96
    stride: int = 0  # 0 -> non-overlapping eval windows (stride = window)
    split_ratios: tuple = (1, 1, 1)
    split_seed: int = 0
    mask_seed: int = 0
    metric_space: str = "normalized"  # or "raw"
    out_dir: str = "bench_out"

    def __post_init__(self):
        if not self.data:
            raise ConfigError("protocol needs at least one dataset")
        if not self.models:
            raise ConfigError("protocol needs at least one model")
        for m in self.models:
            if m not in ("median", "last", "engine", "engine+prefix"):
                raise ConfigError(f"unknown model {m!r}")
        for r in self.rates:
            if not (0.0 < r <= 1.0):
                raise ConfigError(f"missing rate {r} outside (0, 1]")
        for p in self.patterns:
            if p not in PATTERNS:
                raise ConfigError(f"unknown missing pattern {p!r}")
        if self.metric_space not in ("normalized", "raw"):
            raise ConfigError(f"metric_space must be normalized or raw, got {self.metric_space!r}")
        if not self.stride:
            self.stride = self.window_length


@dataclass
class BenchCell:
    model: str
    pattern: str
    rate: float
    mse: float
    mae: float
    count: int


@dataclass
class BenchReport:
    cells: list
    averages: dict  # model -> {"mse": .., "mae": ..}
    meta: dict

    def cell(self, model, pattern, rate):
        for c in self.cells:
            if c.model == model and c.pattern == pattern and abs(c.rate - rate) < 1e-12:
                return c
        raise KeyError((model, pattern, rate))


def cell_seed(base_seed, variable, window_index, rate, pattern) -> int:
    """Stable evaluation-mask seed from the cell identity; no mask files."""
    key = f"{base_seed}|{variable}|{window_index}|{rate:.6f}|{pattern}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def _make_mask(pattern, length, rate, seed):
    if pattern == "random":
        return mask_random(length, rate, seed)
    return mask_continuous(length, rate, seed)


# ---------------------------------------------------------------------------
# protocol runner


class _EngineModel:
    def __init__(self, checkpoint, prefix=None, name="engine"):
        self.name = name
        self.engine = Engine.load(checkpoint)
        self.prefix = None
        if prefix is not None:
            from .adaptation import inference_prefix, load_prefix

            self.prefix = inference_prefix(self.engine, load_prefix(prefix))
        self.meta = Engine.read_meta(checkpoint)

    def impute_many(self, values, masks, domains):
        doms = domains if self.engine.cfg.domains else None
        composed, _, _ = self.engine.impute_batch(values, masks, doms, prefix=self.prefix)
        return composed


def _build_models(cfg: ProtocolConfig):
    models = {}
    train_vars_seen = set()
    for name in cfg.models:
        if name == "median":
            models[name] = impute_median
        elif name == "last":
            models[name] = impute_last
        elif name in ("engine", "engine+prefix"):
            if cfg.checkpoint is None:
                raise ConfigError(f"model {name!r} requires a checkpoint")
            if name == "engine+prefix" and cfg.prefix is None:
                raise ConfigError("model 'engine+prefix' requires a prefix file")
            wrapped = _EngineModel(
                cfg.checkpoint,
                prefix=cfg.prefix if name == "engine+prefix" else None,
                name=name,
            )
            models[name] = wrapped
            train_vars_seen.update(wrapped.meta.get("train_variables", []))
            train_vars_seen.update(wrapped.meta.get("val_variables", []))
        else:
            raise ConfigError(f"unknown model {name!r}")
    return models, train_vars_seen


def run_protocol(cfg: ProtocolConfig) -> BenchReport:
    """Evaluate every configured model over the (pattern, rate) grid."""
    series_list = [s if isinstance(s, MultivariateSeries) else load_csv(s) for s in cfg.data]
    models, train_vars = _build_models(cfg)

    test_windows = []
    split_record = {}
    for series in series_list:
        tr, va, te = split_by_variable(series.variables, cfg.split_ratios, cfg.split_seed)
        split_record[series.domain] = {"train": tr, "val": va, "test": te}
        test_windows.extend(slice_windows(series, cfg.window_length, cfg.stride, variables=sorted(te)))
    if not test_windows:
        raise ConfigError("no test windows: series shorter than the window length?")

    # leakage guard: scored variables must be disjoint from training ones
    scored_vars = {qualify(w.domain, w.variable) for w in test_windows}
    overlap = scored_vars & train_vars
    if overlap:
        raise ConfigError(f"train/test variable leakage: {sorted(overlap)[:5]}")

    acc = {
        (m, p, r): {"sq": 0.0, "abs": 0.0, "n": 0}
        for m in models for p in cfg.patterns for r in cfg.rates
    }
    normalized = cfg.metric_space == "normalized"

    for pattern in cfg.patterns:
        for rate in cfg.rates:
            masks = []
            for wi, w in enumerate(test_windows):
                seed = cell_seed(cfg.mask_seed, qualify(w.domain, w.variable), wi, rate, pattern)
                masks.append(_make_mask(pattern, len(w.values), rate, seed))
            values = np.array([w.values for w in test_windows])
            native = np.array([w.mask for w in test_windows])
            artificial = np.array(masks)
            view_mask = compose_masks(native, artificial)
            view_values = values * view_mask
            scales = np.ones(len(test_windows))
            if normalized:
                for i in range(len(test_windows)):
                    _, st = revin_normalize(view_values[i], view_mask[i])
                    scales[i] = st.std + st.eps
            for name, model in models.items():
                if isinstance(model, _EngineModel):
                    domains = [w.domain for w in test_windows]
                    imputed = model.impute_many(view_values, view_mask, domains)
                else:
                    imputed = np.array([
                        model(view_values[i], view_mask[i]) for i in range(len(test_windows))
                    ])
                bucket = acc[(name, pattern, rate)]
                for i in range(len(test_windows)):
                    sel = eval_positions(native[i], artificial[i]) > 0
                    if not sel.any():
                        continue
                    err = (imputed[i][sel] - values[i][sel]) / scales[i]
                    bucket["sq"] += float((err**2).sum())
                    bucket["abs"] += float(np.abs(err).sum())
                    bucket["n"] += int(sel.sum())

    cells = []
    for (m, p, r), b in sorted(acc.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        if b["n"] == 0:
            continue  # absent cell: nothing scorable
        cells.append(BenchCell(m, p, float(r), b["sq"] / b["n"], b["abs"] / b["n"], b["n"]))

    averages = {}
    for m in models:
        own = [c for c in cells if c.model == m]
        if own:
            averages[m] = {
                "mse": sum(c.mse for c in own) / len(own),
                "mae": sum(c.mae for c in own) / len(own),
            }
    meta = {
        "metric_space": cfg.metric_space,
        "window_length": cfg.window_length,
        "stride": cfg.stride,
        "split_seed": cfg.split_seed,
        "mask_seed": cfg.mask_seed,
        "rates": [float(r) for r in cfg.rates],
        "patterns": list(cfg.patterns),
        "splits": split_record,
        "scored_variables": sorted(scored_vars),
    }
    return BenchReport(cells, averages, meta)


# ---------------------------------------------------------------------------
# rendering


def render_csv(report: BenchReport) -> str:
    buf = io.StringIO()
    buf.write(f"# metric_space={report.meta['metric_space']}\n")
    buf.write("model,pattern,rate,mse,mae,count\n")
    for c in report.cells:
        buf.write(f"{c.model},{c.pattern},{c.rate!r},{c.mse!r},{c.mae!r},{c.count}\n")
    for model in sorted(report.averages):
        a = report.averages[model]
        buf.write(f"{model},average,,{a['mse']!r},{a['mae']!r},\n")
    return buf.getvalue()


def parse_csv(text: str) -> BenchReport:
    lines = [l for l in text.splitlines() if l.strip()]
    meta = {}
    if lines and lines[0].startswith("#"):
        for piece in lines.pop(0)[1:].strip().split(","):
            k, _, v = piece.partition("=")
            meta[k.strip()] = v.strip()
    header = lines.pop(0)
    if header != "model,pattern,rate,mse,mae,count":
        raise ConfigError("unrecognized report header")
    cells, averages = [], {}
    for line in lines:
        model, pattern, rate, mse, mae, count = line.split(",")
        if pattern == "average":
            averages[model] = {"mse": float(mse), "mae": float(mae)}
        else:
            cells.append(BenchCell(model, pattern, float(rate), float(mse),
                                   float(mae), int(count)))
    return BenchReport(cells, averages, meta)


def render_report(report: BenchReport, out_dir) -> dict:
    """Write report.csv + report.jsonl (+ meta) under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path, "w") as fh:
        fh.write(render_csv(report))
    jsonl_path = os.path.join(out_dir, "report.jsonl")
    with open(jsonl_path, "w") as fh:
        fh.write(json.dumps({"meta": report.meta}, sort_keys=True) + "\n")
        for c in report.cells:
            fh.write(json.dumps({
                "model": c.model, "pattern": c.pattern, "rate": c.rate,
                "mse": c.mse, "mae": c.mae, "count": c.count,
            }, sort_keys=True) + "\n")
        for model in sorted(report.averages):
            fh.write(json.dumps({"model": model, "average": report.averages[model]},
                                sort_keys=True) + "\n")
    return {"csv": csv_path, "jsonl": jsonl_path}
