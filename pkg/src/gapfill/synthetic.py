"""Synthetic sinusoid corpora for smoke experiments and the scaled
evaluation runs."""

from __future__ import annotations

import numpy as np

from .data import MultivariateSeries


def sinusoid_series(n_variables=30, n_points=624, period_range=(12.0, 48.0),
                    amp_range=(0.5, 2.0), noise=0.01, seed=0,
                    domain="sine") -> MultivariateSeries:
    """Fully observed multivariate series; each variable is one noisy sinusoid
    with its own frequency, phase, amplitude, and offset."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_points, dtype=np.float64)
    cols = []
    for _ in range(n_variables):
        period = rng.uniform(*period_range)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(*amp_range)
        offset = rng.uniform(-1.0, 1.0)
        wave = offset + amp * np.sin(2 * np.pi * t / period + phase)
        cols.append(wave + noise * rng.standard_normal(n_points))
    values = np.stack(cols, axis=1)
    names = [f"s{i:03d}" for i in range(n_variables)]
    return MultivariateSeries(names, values, np.ones_like(values), domain=domain)
