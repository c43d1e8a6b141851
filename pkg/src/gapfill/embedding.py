"""Input tokenization: patches, masked statistics, missing and domain tokens.

A normalized window becomes the token sequence [domain, global-stats,
patch_0 .. patch_{N-1}].  Each patch token is the sum of a patch-value
projection, a (shared) statistics projection, and the missing-pattern vector
scaled by that patch's missing ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as N
from .errors import ConfigError


@dataclass
class PatchSet:
    """Non-overlapping patch view of a window: values, masks, missing ratios."""

    values: np.ndarray  # (..., N, P)
    masks: np.ndarray  # (..., N, P)
    ratios: np.ndarray  # (..., N), fraction of missing points per patch


def patchify(values: np.ndarray, mask: np.ndarray, patch_length: int) -> PatchSet:
    """Split a window (or batch of windows) into contiguous patches."""
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    length = values.shape[-1]
    if patch_length < 1 or length % patch_length:
        raise ConfigError(
            f"window length {length} not divisible by patch length {patch_length}"
        )
    n = length // patch_length
    shape = values.shape[:-1] + (n, patch_length)
    pv = values.reshape(shape)
    pm = mask.reshape(shape)
    ratios = 1.0 - pm.sum(axis=-1) / patch_length
    return PatchSet(pv, pm, ratios)


def masked_stats(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """(min, median, max, least-squares slope) over observed positions.

    Works on any (..., P) stack.  Fully missing segments yield a zero vector;
    a single observed point has slope 0.  Indices enter the slope as the raw
    integer positions within the segment.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64) > 0
    p = values.shape[-1]
    count = mask.sum(axis=-1)
    any_obs = count > 0

    hi = np.where(mask, values, -np.inf).max(axis=-1)
    lo = np.where(mask, values, np.inf).min(axis=-1)

    ordered = np.sort(np.where(mask, values, np.inf), axis=-1)
    c = np.maximum(count.astype(int), 1)
    lo_idx = (c - 1) // 2
    hi_idx = c // 2
    med = 0.5 * (
        np.take_along_axis(ordered, lo_idx[..., None], axis=-1)[..., 0]
        + np.take_along_axis(ordered, hi_idx[..., None], axis=-1)[..., 0]
    )

    idx = np.arange(p, dtype=np.float64)
    m = mask.astype(np.float64)
    st = (m * idx).sum(axis=-1)
    sy = (m * values).sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        tbar = st / count
        ybar = sy / count
        num = (m * (idx - tbar[..., None]) * (values - ybar[..., None])).sum(axis=-1)
        den = (m * (idx - tbar[..., None]) ** 2).sum(axis=-1)
        slope = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)

    out = np.stack(
        [
            np.where(any_obs, lo, 0.0),
            np.where(any_obs, med, 0.0),
            np.where(any_obs, hi, 0.0),
            np.where(any_obs, slope, 0.0),
        ],
        axis=-1,
    )
    return out


def patch_stats(values, mask) -> np.ndarray:
    """Statistics for one patch (alias of masked_stats on a vector)."""
    return masked_stats(np.atleast_1d(values), np.atleast_1d(mask))


def series_stats(values, mask) -> np.ndarray:
    """Statistics for a whole window; same contract as patch_stats."""
    return masked_stats(np.atleast_1d(values), np.atleast_1d(mask))


@dataclass
class EmbeddingParams:
    """Trainable pieces of the tokenizer."""

    patch_w: N.Tensor  # (P, D)
    patch_b: N.Tensor  # (D,)
    stats_w: N.Tensor  # (4, D), shared between patch and series statistics
    stats_b: N.Tensor  # (D,)
    missing: N.Tensor  # (D,), scaled by each patch's missing ratio
    domain_table: N.Tensor  # (K, D); K == 1 means one shared domain vector
    domains: list  # label per table row; empty when shared

    def named(self, prefix="embed") -> dict:
        return {
            f"{prefix}.patch_w": self.patch_w,
            f"{prefix}.patch_b": self.patch_b,
            f"{prefix}.stats_w": self.stats_w,
            f"{prefix}.stats_b": self.stats_b,
            f"{prefix}.missing": self.missing,
            f"{prefix}.domain_table": self.domain_table,
        }

    def domain_index(self, label) -> int:
        if not self.domains:
            return 0
        if label is None:
            raise ConfigError("domain label required: per-domain table configured")
        try:
            return self.domains.index(label)
        except ValueError:
            raise ConfigError(f"unknown domain label {label!r}") from None


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype)


def init_embedding(rng, patch_length, width, domains=None, dtype=np.float32) -> EmbeddingParams:
    domains = list(domains) if domains else []
    k = max(1, len(domains))
    return EmbeddingParams(
        patch_w=N.parameter(xavier_uniform(rng, patch_length, width, dtype), "embed.patch_w"),
        patch_b=N.parameter(np.zeros(width, dtype=dtype), "embed.patch_b"),
        stats_w=N.parameter(xavier_uniform(rng, 4, width, dtype), "embed.stats_w"),
        stats_b=N.parameter(np.zeros(width, dtype=dtype), "embed.stats_b"),
        missing=N.parameter((rng.normal(0, 0.02, width)).astype(dtype), "embed.missing"),
        domain_table=N.parameter((rng.normal(0, 0.02, (k, width))).astype(dtype), "embed.domain_table"),
        domains=domains,
    )


def embed_batch(params: EmbeddingParams, values: np.ndarray, mask: np.ndarray,
                patch_length: int, domain_indices: np.ndarray) -> N.Tensor:
    """Token sequences for a batch of normalized windows: (B, N+2, D)."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    mask = np.atleast_2d(np.asarray(mask, dtype=np.float64))
    patches = patchify(values, mask, patch_length)
    dtype = params.patch_w.data.dtype

    pv = patches.values.astype(dtype)
    pstats = masked_stats(patches.values, patches.masks).astype(dtype)
    gstats = masked_stats(values, mask).astype(dtype)[:, None, :]
    ratios = patches.ratios.astype(dtype)[..., None]

    tok = N.add(N.matmul(N.constant(pv), params.patch_w), params.patch_b)
    tok = N.add(tok, N.add(N.matmul(N.constant(pstats), params.stats_w), params.stats_b))
    tok = N.add(tok, N.mul(N.constant(ratios), params.missing))

    tok_g = N.add(N.matmul(N.constant(gstats), params.stats_w), params.stats_b)
    rows = N.take_rows(params.domain_table, np.asarray(domain_indices, dtype=np.int64))
    tok_k = N.reshape(rows, (values.shape[0], 1, params.domain_table.data.shape[1]))
    return N.concat([tok_k, tok_g, tok], axis=1)


def embed_input(params: EmbeddingParams, values, mask, patch_length, domain=None) -> N.Tensor:
    """Single normalized window -> (N+2, D) token sequence."""
    idx = params.domain_index(domain)
    out = embed_batch(
        params,
        np.asarray(values)[None, :],
        np.asarray(mask)[None, :],
        patch_length,
        np.array([idx]),
    )
    return N.reshape(out, out.data.shape[1:])
