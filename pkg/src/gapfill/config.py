"""Flat key = value config files and the typed settings they populate.

Format: one `key = value` per line, `#` comments, blank lines ignored.
Values parse as numbers or booleans when they look like them; commas make
lists.  Every field below is overridable; unknown keys are an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigError


def _parse_scalar(text: str):
    s = text.strip()
    low = s.lower()
    if low in ("true", "yes"):
        return True
    if low in ("false", "no"):
        return False
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        if "," in value:
            out[key] = [_parse_scalar(v) for v in value.split(",") if v.strip()]
        else:
            out[key] = _parse_scalar(value)
    return out


def parse_config_file(path) -> dict:
    try:
        with open(path) as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _as_list(value):
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return list(value)
    return [value]


def _ratios(value):
    if isinstance(value, str):
        parts = [p for p in value.replace(":", ",").split(",") if p.strip()]
        return tuple(float(p) for p in parts)
    return tuple(value) if isinstance(value, (list, tuple)) else (1, 1, 1)


@dataclass
class TrainSettings:
    """Everything the train workflow needs, with desk-scale defaults."""

    data: list = field(default_factory=list)
    domains: list = field(default_factory=list)  # one label per data path
    domain_mode: str = "shared"  # or "per_domain"
    window_length: int = 96
    patch_length: int = 16
    stride: int = 1
    split_ratios: tuple = (1, 1, 1)
    split_seed: int = 0
    layers: int = 2
    heads: int = 4
    width: int = 64
    ffn_width: int = 0
    dropout: float = 0.1
    max_seq: int = 16
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    patience: int = 3
    alpha: float = 0.1
    mask_rate_min: float = 0.1
    mask_rate_max: float = 0.9
    val_rate: float = 0.5
    seed: int = 0
    precision: str = "32"
    max_train_windows: int = 0  # 0 = no cap
    log_path: str = ""

    def __post_init__(self):
        self.data = _as_list(self.data)
        self.domains = _as_list(self.domains)
        self.split_ratios = _ratios(self.split_ratios)
        self.precision = str(self.precision)
        if self.domain_mode not in ("shared", "per_domain"):
            raise ConfigError(f"domain_mode must be shared or per_domain, got {self.domain_mode!r}")
        if self.domains and len(self.domains) != len(self.data):
            raise ConfigError("domains list must match data list length")


@dataclass
class BenchSettings:
    data: list = field(default_factory=list)
    checkpoint: str = ""
    prefix: str = ""
    models: list = field(default_factory=lambda: ["engine", "median", "last"])
    rates: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 10)])
    patterns: list = field(default_factory=lambda: ["random", "continuous"])
    window_length: int = 96
    stride: int = 0
    split_ratios: tuple = (1, 1, 1)
    split_seed: int = 0
    mask_seed: int = 0
    metric_space: str = "normalized"

    def __post_init__(self):
        self.data = _as_list(self.data)
        self.models = _as_list(self.models)
        self.rates = [float(r) for r in _as_list(self.rates)]
        self.patterns = _as_list(self.patterns)
        self.split_ratios = _ratios(self.split_ratios)


def settings_from_dict(cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return cls(**values)
