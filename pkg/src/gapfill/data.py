"""Series ingest, windowing, variable-wise splits, masks, and instance norm.

All operations are pure functions of (inputs, seed) and safe to call
concurrently.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError, ParseError, RangeError


@dataclass
class MultivariateSeries:
    """T x V value matrix with a {0,1} observation mask and a domain label."""

    variables: list
    values: np.ndarray
    mask: np.ndarray
    domain: str = "default"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.values.shape != self.mask.shape:
            raise FormatError(
                f"values {self.values.shape} and mask {self.mask.shape} shapes differ"
            )
        if self.values.ndim != 2 or self.values.shape[1] != len(self.variables):
            raise FormatError("values must be T x V with one column per variable")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise FormatError("mask entries must be 0 or 1")

    @property
    def length(self) -> int:
        return self.values.shape[0]


@dataclass
class SeriesWindow:
    """One fixed-length univariate segment plus its observation mask."""

    values: np.ndarray
    mask: np.ndarray
    variable: str
    domain: str = "default"
    start: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.values.shape != self.mask.shape or self.values.ndim != 1:
            raise FormatError("window values/mask must be equal-length vectors")


# Small enough that standardized windows keep unit variance to well under
# 1e-6 at ordinary scales, while still guarding the constant-window division.
REVIN_EPS = 1e-8


@dataclass
class RevinStats:
    """Per-window normalization statistics, stored for exact inversion."""

    mean: float
    std: float
    eps: float = REVIN_EPS
    degenerate: bool = field(default=False, compare=False)


def load_csv(path, domain=None) -> MultivariateSeries:
    """Read a header-fronted CSV; empty cells become missing (mask 0, value 0).

    A leading column named ``timestamp`` is skipped.  Non-numeric non-empty
    cells raise ParseError naming row and column; ragged rows raise
    FormatError.
    """
    path = str(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path}: empty file (missing header)")
    header = [h.strip() for h in rows[0]]
    skip_first = bool(header) and header[0].lower() == "timestamp"
    names = header[1:] if skip_first else header
    if not names:
        raise FormatError(f"{path}: header defines no variables")

    width = len(header)
    values = np.zeros((len(rows) - 1, len(names)))
    mask = np.ones_like(values)
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise FormatError(f"{path}: row {r} has {len(row)} cells, expected {width}")
        cells = row[1:] if skip_first else row
        for c, cell in enumerate(cells):
            text = cell.strip()
            if text == "":
                mask[r - 2, c] = 0.0
                continue
            try:
                values[r - 2, c] = float(text)
            except ValueError as exc:
                raise ParseError(
                    f"{path}: non-numeric cell at row {r}, column {names[c]!r}: {cell!r}"
                ) from exc
    if domain is None:
        base = path.rsplit("/", 1)[-1]
        domain = base.rsplit(".", 1)[0]
    return MultivariateSeries(names, values, mask, domain=domain)


def slice_windows(series: MultivariateSeries, length: int, stride: int = 1,
                  variables=None) -> list:
    """Fixed-length windows per variable; empty when the series is too short."""
    if length < 1 or stride < 1:
        raise ConfigError("window length and stride must be >= 1")
    wanted = list(series.variables) if variables is None else list(variables)
    col = {name: i for i, name in enumerate(series.variables)}
    out = []
    t = series.length
    for name in wanted:
        if name not in col:
            raise ConfigError(f"unknown variable {name!r}")
        if t < length:
            continue
        v = col[name]
        for start in range(0, t - length + 1, stride):
            out.append(
                SeriesWindow(
                    series.values[start : start + length, v],
                    series.mask[start : start + length, v],
                    variable=name,
                    domain=series.domain,
                    start=start,
                )
            )
    return out


def split_by_variable(variables, ratios=(1, 1, 1), seed=0):
    """Deterministic disjoint partition of variable names by ratio.

    Counts follow the largest-remainder rule, so a 1:1:1 split of V names
    yields part sizes differing by at most one.
    """
    names = list(variables)
    parts = len(ratios)
    if parts < 1 or any(r <= 0 for r in ratios):
        raise ConfigError("ratios must be positive")
    if len(names) < parts:
        raise ConfigError(f"{len(names)} variables cannot fill {parts} split parts")
    rng = np.random.default_rng(seed)
    order = [names[i] for i in rng.permutation(len(names))]
    total = float(sum(ratios))
    quotas = [len(names) * r / total for r in ratios]
    counts = [math.floor(q) for q in quotas]
    remainders = sorted(
        range(parts), key=lambda i: (-(quotas[i] - counts[i]), i)
    )
    for i in range(len(names) - sum(counts)):
        counts[remainders[i % parts]] += 1
    # Every part must be non-empty: borrow from the largest when rounding
    # starved one (possible with very skewed ratios).
    for i in range(parts):
        while counts[i] == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[i] += 1
    splits, pos = [], 0
    for c in counts:
        splits.append(order[pos : pos + c])
        pos += c
    return tuple(splits)


def _check_rate(rate: float) -> None:
    if not (0.0 <= rate <= 1.0):
        raise RangeError(f"missing rate {rate} outside [0, 1]")


def mask_random(length: int, rate: float, seed) -> np.ndarray:
    """Exactly floor(length * rate) zeros at uniform positions."""
    _check_rate(rate)
    k = int(math.floor(length * rate))
    mask = np.ones(length)
    if k:
        rng = np.random.default_rng(seed)
        mask[rng.permutation(length)[:k]] = 0.0
    return mask


def mask_continuous(length: int, rate: float, seed) -> np.ndarray:
    """One contiguous zero block of floor(length * rate), uniform offset."""
    _check_rate(rate)
    k = int(math.floor(length * rate))
    mask = np.ones(length)
    if k:
        rng = np.random.default_rng(seed)
        start = int(rng.integers(0, length - k + 1))
        mask[start : start + k] = 0.0
    return mask


def qualify(domain: str, variable: str) -> str:
    """Corpus-wide variable id; bare names may collide across datasets."""
    return f"{domain}:{variable}"


def compose_masks(native: np.ndarray, artificial: np.ndarray) -> np.ndarray:
    """Observed only where both the source and the artificial mask observe."""
    return native * artificial


def eval_positions(native: np.ndarray, artificial: np.ndarray) -> np.ndarray:
    """Positions that are artificially hidden but natively observed.

    Metrics are taken over exactly these; natively missing points have no
    ground truth.
    """
    return native * (1.0 - artificial)


def revin_normalize(values: np.ndarray, mask: np.ndarray, eps: float = REVIN_EPS):
    """Standardize by observed-position statistics; missing positions -> 0.

    Statistics use the population variance over observed points only.  A
    fully missing window normalizes to zeros with neutral stats (0, 1) and a
    degenerate flag so imputation can still run.
    """
    values = np.asarray(values, dtype=np.float64)
    observed = np.asarray(mask) > 0
    if not observed.any():
        return np.zeros_like(values), RevinStats(0.0, 1.0, eps, degenerate=True)
    seen = values[observed]
    mean = float(seen.mean())
    std = float(math.sqrt(((seen - mean) ** 2).mean()))
    out = (values - mean) / (std + eps)
    out[~observed] = 0.0
    return out, RevinStats(mean, std, eps)


def revin_denormalize(values: np.ndarray, stats: RevinStats) -> np.ndarray:
    """Exact inverse of revin_normalize on observed positions."""
    return np.asarray(values) * (stats.std + stats.eps) + stats.mean
