"""Model assembly: tokenizer + backbone + heads, checkpoint round trip, and
the window-level imputation pipeline."""

from __future__ import annotations

import json
import os

import numpy as np

from . import numerics as N
from .backbone import (
    BackboneConfig,
    BackboneParams,
    PrefixKV,
    compose_imputation,
    forward,
    init_backbone,
    output_head,
)
from .data import revin_normalize
from .embedding import EmbeddingParams, embed_batch, init_embedding, xavier_uniform
from .errors import ConfigError, FormatError

_DTYPES = {"32": np.float32, "64": np.float64}


def _dtype_for(precision: str):
    if str(precision) not in _DTYPES:
        raise ConfigError(f"precision must be '32' or '64', got {precision!r}")
    return _DTYPES[str(precision)]


class Engine:
    """A complete imputation model with named parameters."""

    def __init__(self, cfg: BackboneConfig, embed: EmbeddingParams,
                 backbone: BackboneParams, contrast_w: N.Tensor, precision="32"):
        self.cfg = cfg
        self.embed = embed
        self.backbone = backbone
        self.contrast_w = contrast_w
        self.precision = str(precision)

    @classmethod
    def create(cls, cfg: BackboneConfig, seed=0, precision="32") -> "Engine":
        dtype = _dtype_for(precision)
        rng = np.random.default_rng(seed)
        embed = init_embedding(rng, cfg.patch_length, cfg.width, cfg.domains, dtype)
        bb = init_backbone(rng, cfg, dtype)
        cw = N.parameter(xavier_uniform(rng, cfg.width, cfg.width, dtype), "contrast.w")
        return cls(cfg, embed, bb, cw, precision)

    # -- parameters ---------------------------------------------------------

    def params(self) -> dict:
        out = dict(self.embed.named())
        out.update({f"backbone.{k}": v for k, v in self.backbone.named().items()})
        out["contrast.w"] = self.contrast_w
        return out

    def zero_grads(self) -> None:
        for p in self.params().values():
            p.zero_grad()

    # -- persistence --------------------------------------------------------

    def config_dict(self) -> dict:
        c = self.cfg
        return {
            "layers": c.layers,
            "heads": c.heads,
            "width": c.width,
            "window_length": c.window_length,
            "patch_length": c.patch_length,
            "ffn_width": c.ffn_width,
            "dropout": c.dropout,
            "max_seq": c.max_seq,
            "domains": list(c.domains),
        }

    def save(self, path, meta=None) -> None:
        arrays = {k: v.data for k, v in self.params().items()}
        N.save_tensors(path, arrays)
        record = {"model": self.config_dict(), "precision": self.precision}
        record.update(meta or {})
        tmp = f"{path}.json.tmp"
        with open(tmp, "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
        os.replace(tmp, f"{path}.json")

    @staticmethod
    def read_meta(path) -> dict:
        meta_path = f"{path}.json"
        if not os.path.exists(meta_path):
            raise FormatError(f"missing checkpoint metadata {meta_path}")
        with open(meta_path) as fh:
            return json.load(fh)

    @classmethod
    def load(cls, path, precision=None) -> "Engine":
        meta = cls.read_meta(path)
        cfg = BackboneConfig(**meta["model"])
        precision = precision or meta.get("precision", "32")
        engine = cls.create(cfg, seed=0, precision=precision)
        arrays = N.load_tensors(path)
        own = engine.params()
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise FormatError(f"{path}: checkpoint lacks tensors {missing[:4]}")
        for name, tensor in own.items():
            arr = arrays[name]
            if arr.shape != tensor.data.shape:
                raise ConfigError(
                    f"{path}: tensor {name} has shape {arr.shape}, "
                    f"config expects {tensor.data.shape}"
                )
            tensor.data = arr.astype(tensor.data.dtype)
        return engine

    # -- forward paths ------------------------------------------------------

    def forward_norm(self, values_norm, mask, domain_indices, prefix: PrefixKV | None = None,
                     train=False, rng=None, extra_tokens: N.Tensor | None = None):
        """Hidden states + imputation output for normalized windows.

        `extra_tokens` (B, M, D) are appended after the patch tokens (used by
        the forecasting conversion); the imputation head is only applied when
        no extra tokens are present.
        """
        tokens = embed_batch(self.embed, values_norm, mask, self.cfg.patch_length,
                             domain_indices)
        if extra_tokens is not None:
            tokens = N.concat([tokens, extra_tokens], axis=1)
        hidden = forward(self.backbone, self.cfg, tokens, prefix=prefix,
                         train=train, rng=rng)
        out = None
        if extra_tokens is None:
            out = output_head(self.backbone, self.cfg, hidden.final)
        return hidden, out

    def impute_batch(self, values, masks, domains=None, prefix: PrefixKV | None = None):
        """Raw windows in, composed raw imputations out: (B, L) arrays."""
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        masks = np.atleast_2d(np.asarray(masks, dtype=np.float64))
        b = values.shape[0]
        norm = np.zeros_like(values)
        stats = []
        for i in range(b):
            norm[i], st = revin_normalize(values[i], masks[i])
            stats.append(st)
        if domains is None:
            idx = np.full(b, self.embed.domain_index(None), dtype=np.int64)
        else:
            idx = np.array([self.embed.domain_index(d) for d in domains], dtype=np.int64)
        _, out = self.forward_norm(norm, masks, idx, prefix=prefix)
        composed = np.zeros_like(values)
        for i in range(b):
            composed[i] = compose_imputation(values[i], masks[i], stats[i], out.data[i])
        return composed, out.data.astype(np.float64), stats

    def impute_window(self, values, mask, domain=None, prefix: PrefixKV | None = None):
        composed, norm_out, stats = self.impute_batch(
            np.asarray(values)[None], np.asarray(mask)[None],
            None if domain is None else [domain], prefix
        )
        return composed[0], norm_out[0], stats[0]
