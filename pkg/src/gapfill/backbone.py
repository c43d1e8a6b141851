"""Causal pre-norm transformer with per-layer prefix key/value injection.

Layer layout follows the GPT-2 family: learned absolute positions, pre-norm
multi-head causal self-attention, GELU feed-forward, residuals, and a final
layer norm.  When a prefix is supplied, each layer's attention keys/values
are prepended with one extra slot that every position may attend; the prefix
slot receives no position embedding and produces no output position, so
removing it restores the base model exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as N
from .errors import ConfigError, ContractError


@dataclass
class BackboneConfig:
    layers: int = 6
    heads: int = 4
    width: int = 64
    window_length: int = 96
    patch_length: int = 16
    ffn_width: int = 0  # 0 -> 4 * width
    dropout: float = 0.1
    max_seq: int = 16
    domains: list = field(default_factory=list)  # empty -> one shared domain vector

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("layer count must be >= 1")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        if self.patch_length < 1 or self.window_length % self.patch_length:
            raise ConfigError(
                f"window length {self.window_length} not divisible by patch length {self.patch_length}"
            )
        if not self.ffn_width:
            self.ffn_width = 4 * self.width
        if self.seq_len > self.max_seq:
            raise ConfigError(
                f"max_seq {self.max_seq} too small for {self.seq_len} tokens"
            )

    @property
    def n_patches(self) -> int:
        return self.window_length // self.patch_length

    @property
    def seq_len(self) -> int:
        return self.n_patches + 2

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


@dataclass
class PrefixKV:
    """One (key, value) slot per layer; optionally distinct per batch row.

    Tensors are shaped (D,) shared or (B, D) per sample.
    """

    keys: list
    values: list

    def __len__(self):
        return len(self.keys)

    @classmethod
    def from_packed(cls, packed: N.Tensor) -> "PrefixKV":
        """Split a (Layer, 2, D) or (Layer, B, 2, D) tensor into slots."""
        shape = packed.data.shape
        if len(shape) == 3 and shape[1] == 2:
            keys = [N.take_slice(packed, (i, 0)) for i in range(shape[0])]
            vals = [N.take_slice(packed, (i, 1)) for i in range(shape[0])]
        elif len(shape) == 4 and shape[2] == 2:
            keys = [N.take_slice(packed, (i, slice(None), 0)) for i in range(shape[0])]
            vals = [N.take_slice(packed, (i, slice(None), 1)) for i in range(shape[0])]
        else:
            raise ConfigError(f"prefix tensor shape {shape} not (Layer,2,D) or (Layer,B,2,D)")
        return cls(keys, vals)


@dataclass
class BackboneParams:
    wpe: N.Tensor
    blocks: list  # list of dicts of Tensors
    lnf_g: N.Tensor
    lnf_b: N.Tensor
    head_w: N.Tensor
    head_b: N.Tensor

    def named(self) -> dict:
        out = {"wpe": self.wpe, "lnf_g": self.lnf_g, "lnf_b": self.lnf_b,
               "head_w": self.head_w, "head_b": self.head_b}
        for i, blk in enumerate(self.blocks):
            for key, tensor in blk.items():
                out[f"block{i}.{key}"] = tensor
        return out


def init_backbone(rng: np.random.Generator, cfg: BackboneConfig, dtype=np.float32) -> BackboneParams:
    d, f = cfg.width, cfg.ffn_width

    def xavier(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, (fan_in, fan_out)).astype(dtype)

    blocks = []
    for _ in range(cfg.layers):
        blocks.append({
            "ln1_g": N.parameter(np.ones(d, dtype=dtype)),
            "ln1_b": N.parameter(np.zeros(d, dtype=dtype)),
            "attn_w": N.parameter(xavier(d, 3 * d)),
            "attn_b": N.parameter(np.zeros(3 * d, dtype=dtype)),
            "proj_w": N.parameter(xavier(d, d)),
            "proj_b": N.parameter(np.zeros(d, dtype=dtype)),
            "ln2_g": N.parameter(np.ones(d, dtype=dtype)),
            "ln2_b": N.parameter(np.zeros(d, dtype=dtype)),
            "fc_w": N.parameter(xavier(d, f)),
            "fc_b": N.parameter(np.zeros(f, dtype=dtype)),
            "out_w": N.parameter(xavier(f, d)),
            "out_b": N.parameter(np.zeros(d, dtype=dtype)),
        })
    n_out = cfg.n_patches * d
    return BackboneParams(
        wpe=N.parameter(rng.normal(0, 0.02, (cfg.max_seq, d)).astype(dtype)),
        blocks=blocks,
        lnf_g=N.parameter(np.ones(d, dtype=dtype)),
        lnf_b=N.parameter(np.zeros(d, dtype=dtype)),
        head_w=N.parameter(xavier(n_out, cfg.window_length)),
        head_b=N.parameter(np.zeros(cfg.window_length, dtype=dtype)),
    )


@dataclass
class HiddenStates:
    """Per-layer token representations; `final` is post final-norm."""

    per_layer: list
    final: N.Tensor


def _split_heads(t: N.Tensor, b: int, s: int, heads: int, hd: int) -> N.Tensor:
    return N.transpose(N.reshape(t, (b, s, heads, hd)), (0, 2, 1, 3))


def _prefix_slot(t: N.Tensor, b: int, heads: int, hd: int) -> N.Tensor:
    """Shape a (D,) or (B, D) prefix vector into (B, heads, 1, hd)."""
    if t.data.ndim == 1:
        slot = N.reshape(t, (1, heads, 1, hd))
    elif t.data.ndim == 2:
        if t.data.shape[0] != b:
            raise ConfigError(
                f"per-sample prefix has batch {t.data.shape[0]}, input batch is {b}"
            )
        slot = N.reshape(t, (b, heads, 1, hd))
    else:
        raise ConfigError(f"prefix slot must be (D,) or (B, D), got {t.data.shape}")
    return N.broadcast_to(slot, (b, heads, 1, hd))


def forward(params: BackboneParams, cfg: BackboneConfig, tokens: N.Tensor,
            prefix: PrefixKV | None = None, train: bool = False,
            rng: np.random.Generator | None = None) -> HiddenStates:
    """Run the stack over (B, T, D) token sequences."""
    b, t, d = tokens.data.shape
    if t > cfg.max_seq:
        raise ConfigError(f"sequence of {t} tokens exceeds max_seq {cfg.max_seq}")
    if prefix is not None and len(prefix) != cfg.layers:
        raise ConfigError(
            f"prefix has {len(prefix)} layers, backbone has {cfg.layers}"
        )
    heads, hd = cfg.heads, cfg.head_dim
    drop = cfg.dropout if train else 0.0
    if drop > 0 and rng is None:
        raise ConfigError("dropout enabled but no rng supplied")

    n_pfx = 1 if prefix is not None else 0
    col_real = np.arange(-n_pfx, t)  # prefix columns index negative: never blocked
    blocked = col_real[None, :] > np.arange(t)[:, None]

    x = N.add(tokens, N.take_slice(params.wpe, (slice(0, t),)))
    if drop > 0:
        x = N.dropout(x, drop, rng)

    per_layer = []
    scale = 1.0 / np.sqrt(hd)
    for li, blk in enumerate(params.blocks):
        h = N.layer_norm(x, blk["ln1_g"], blk["ln1_b"])
        qkv = N.add(N.matmul(h, blk["attn_w"]), blk["attn_b"])
        q = _split_heads(N.take_slice(qkv, (Ellipsis, slice(0, d))), b, t, heads, hd)
        k = _split_heads(N.take_slice(qkv, (Ellipsis, slice(d, 2 * d))), b, t, heads, hd)
        v = _split_heads(N.take_slice(qkv, (Ellipsis, slice(2 * d, 3 * d))), b, t, heads, hd)
        if prefix is not None:
            k = N.concat([_prefix_slot(prefix.keys[li], b, heads, hd), k], axis=2)
            v = N.concat([_prefix_slot(prefix.values[li], b, heads, hd), v], axis=2)
        scores = N.mul(N.matmul(q, N.transpose(k, (0, 1, 3, 2))), scale)
        probs = N.softmax(scores, axis=-1, blocked=blocked)
        if drop > 0:
            probs = N.dropout(probs, drop, rng)
        ctx = N.reshape(N.transpose(N.matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
        attn_out = N.add(N.matmul(ctx, blk["proj_w"]), blk["proj_b"])
        if drop > 0:
            attn_out = N.dropout(attn_out, drop, rng)
        x = N.add(x, attn_out)

        m = N.layer_norm(x, blk["ln2_g"], blk["ln2_b"])
        ffn = N.matmul(N.gelu(N.add(N.matmul(m, blk["fc_w"]), blk["fc_b"])), blk["out_w"])
        ffn = N.add(ffn, blk["out_b"])
        if drop > 0:
            ffn = N.dropout(ffn, drop, rng)
        x = N.add(x, ffn)
        per_layer.append(x)

    final = N.layer_norm(x, params.lnf_g, params.lnf_b)
    return HiddenStates(per_layer, final)


def output_head(params: BackboneParams, cfg: BackboneConfig, hidden: N.Tensor) -> N.Tensor:
    """Map patch representations back to window values: (B, N+2, D) -> (B, L).

    The domain and global-statistics tokens are dropped; the N patch tokens
    are flattened and linearly projected.
    """
    b, t, d = hidden.data.shape
    if t != cfg.seq_len:
        raise ContractError(
            f"output head expects {cfg.seq_len} tokens (N+2), got {t}"
        )
    patches = N.take_slice(hidden, (slice(None), slice(2, t), slice(None)))
    flat = N.reshape(patches, (b, cfg.n_patches * d))
    return N.add(N.matmul(flat, params.head_w), params.head_b)


def compose_imputation(values: np.ndarray, mask: np.ndarray, stats, model_output_norm: np.ndarray) -> np.ndarray:
    """Final series: model predictions at missing points, originals elsewhere."""
    from .data import revin_denormalize

    values = np.asarray(values, dtype=np.float64)
    predicted = revin_denormalize(np.asarray(model_output_norm, dtype=np.float64), stats)
    return np.where(np.asarray(mask) > 0, values, predicted)
