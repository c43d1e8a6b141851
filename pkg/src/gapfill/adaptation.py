"""Domain adaptation of a frozen base model.

Three mechanisms:
  * a per-layer key/value prefix combined from a trainable continuous prompt
    and a domain-transfer MLP applied to the domain vector (plug-and-play:
    the base checkpoint is never modified);
  * an inter-variable prefix network that tokenizes each variable of a
    multivariate block and derives per-layer, per-variable prefixes from a
    lightweight transformer stack;
  * a forecasting conversion that appends learned padding tokens after the
    patch tokens and reads the future out of their final hidden states.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import numerics as N
from .backbone import PrefixKV
from .data import revin_denormalize, revin_normalize
from .embedding import xavier_uniform
from .engine import Engine
from .errors import ConfigError, ContractError, NumericError
from .training import Adam, TrainConfig, dual_mask_batch, fixed_validation_masks, mse_loss, validation_mse

DEFAULT_BETA = 0.01


# ---------------------------------------------------------------------------
# prefix bundle (continuous prompt + domain-transfer MLP)


@dataclass
class PrefixBundle:
    prompt: N.Tensor  # (Layer, 2, D)
    dt_w1: N.Tensor  # (D, D)
    dt_b1: N.Tensor  # (D,)
    dt_w2: N.Tensor  # (D, Layer*2*D)
    dt_b2: N.Tensor  # (Layer*2*D,)
    beta: float = DEFAULT_BETA

    @property
    def layers(self) -> int:
        return self.prompt.data.shape[0]

    @property
    def width(self) -> int:
        return self.prompt.data.shape[2]

    def named(self) -> dict:
        return {
            "prefix.prompt": self.prompt,
            "prefix.dt_w1": self.dt_w1,
            "prefix.dt_b1": self.dt_b1,
            "prefix.dt_w2": self.dt_w2,
            "prefix.dt_b2": self.dt_b2,
        }


def init_prefix_bundle(rng, layers, width, beta=DEFAULT_BETA, dtype=np.float32) -> PrefixBundle:
    flat = layers * 2 * width
    return PrefixBundle(
        prompt=N.parameter(rng.normal(0, 0.02, (layers, 2, width)).astype(dtype)),
        dt_w1=N.parameter(xavier_uniform(rng, width, width, dtype)),
        dt_b1=N.parameter(np.zeros(width, dtype=dtype)),
        dt_w2=N.parameter(xavier_uniform(rng, width, flat, dtype)),
        dt_b2=N.parameter(np.zeros(flat, dtype=dtype)),
        beta=beta,
    )


def domain_transfer(bundle: PrefixBundle, k) -> N.Tensor:
    """Two-layer MLP mapping the domain vector to per-layer prefix material."""
    k = N.constant(k) if not isinstance(k, N.Tensor) else k
    if k.data.shape != (bundle.width,):
        raise ConfigError(f"domain vector shape {k.data.shape}, expected ({bundle.width},)")
    h = N.gelu(N.add(N.matmul(N.reshape(k, (1, bundle.width)), bundle.dt_w1), bundle.dt_b1))
    out = N.add(N.matmul(h, bundle.dt_w2), bundle.dt_b2)
    return N.reshape(out, (bundle.layers, 2, bundle.width))


def combine_prefix(prompt, khat, beta) -> N.Tensor:
    """Elementwise prompt + beta * khat, kept linear in both arguments."""
    prompt = N.constant(prompt) if not isinstance(prompt, N.Tensor) else prompt
    khat = N.constant(khat) if not isinstance(khat, N.Tensor) else khat
    if prompt.data.shape != khat.data.shape:
        raise ConfigError(
            f"prefix shapes differ: {prompt.data.shape} vs {khat.data.shape}"
        )
    return N.add(prompt, N.mul(khat, float(beta)))


def bundle_prefix_kv(bundle: PrefixBundle, k) -> PrefixKV:
    """The per-layer attention prefix induced by a domain vector."""
    packed = combine_prefix(bundle.prompt, domain_transfer(bundle, k), bundle.beta)
    return PrefixKV.from_packed(packed)


def save_prefix(path, bundle: PrefixBundle, meta=None) -> None:
    N.save_tensors(path, {k: v.data for k, v in bundle.named().items()})
    record = {"beta": bundle.beta, "layers": bundle.layers, "width": bundle.width}
    record.update(meta or {})
    tmp = f"{path}.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
    os.replace(tmp, f"{path}.json")


def load_prefix(path) -> PrefixBundle:
    arrays = N.load_tensors(path)
    meta_path = f"{path}.json"
    beta = DEFAULT_BETA
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            beta = json.load(fh).get("beta", DEFAULT_BETA)
    try:
        return PrefixBundle(
            prompt=N.parameter(arrays["prefix.prompt"]),
            dt_w1=N.parameter(arrays["prefix.dt_w1"]),
            dt_b1=N.parameter(arrays["prefix.dt_b1"]),
            dt_w2=N.parameter(arrays["prefix.dt_w2"]),
            dt_b2=N.parameter(arrays["prefix.dt_b2"]),
            beta=beta,
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: not a prefix checkpoint (missing {exc})") from exc


# ---------------------------------------------------------------------------
# domain-specific fine-tuning (frozen backbone)


def _file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _params_digest(engine: Engine) -> str:
    h = hashlib.sha256()
    for name in sorted(engine.params()):
        h.update(engine.params()[name].data.tobytes())
    return h.hexdigest()


def finetune_loop(base_path, train_windows, val_windows, cfg: TrainConfig,
                  out_path, domain=None, seed=None) -> dict:
    """Train only the prefix machinery against a frozen base checkpoint.

    Emits the prefix to `out_path` (binary + json sidecar); the base
    checkpoint file and every base weight stay bit-identical, verified by
    digest before/after (hard failure otherwise).
    """
    seed = cfg.seed if seed is None else seed
    engine = Engine.load(base_path)
    base_file_digest = _file_digest(base_path)
    base_param_digest = _params_digest(engine)

    rng = np.random.default_rng(seed)
    dtype = engine.embed.patch_w.data.dtype
    bundle = init_prefix_bundle(rng, engine.cfg.layers, engine.cfg.width, dtype=dtype)
    k_idx = engine.embed.domain_index(domain if engine.cfg.domains else None)
    k_vec = N.constant(engine.embed.domain_table.data[k_idx].copy())

    optimizer = Adam(bundle.named(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                     eps=cfg.adam_eps)
    val_masks = fixed_validation_masks(val_windows, cfg.val_rate, seed)
    history = []
    steps = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng((seed, epoch)).permutation(len(train_windows))
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train_windows[i] for i in order[lo : lo + cfg.batch_size]]
            view1, view2 = dual_mask_batch(
                batch, (cfg.mask_rate_min, cfg.mask_rate_max), (seed, epoch, lo)
            )
            domains_idx = np.full(len(batch), k_idx, dtype=np.int64)
            losses = []
            for view in (view1, view2):
                prefix = bundle_prefix_kv(bundle, k_vec)
                _, out = engine.forward_norm(view.norm_values, view.view_mask,
                                             domains_idx, prefix=prefix)
                losses.append(mse_loss(out, view.target_norm, view.native_mask))
            total = N.add(losses[0], losses[1])
            if not np.isfinite(total.data).all():
                raise NumericError("non-finite fine-tuning loss")
            optimizer.zero_grad()
            N.backward(total)
            optimizer.step()
            steps += 1
        if val_windows:
            prefix = bundle_prefix_kv(bundle, k_vec)
            history.append(validation_mse(engine, val_windows, val_masks, prefix=prefix))

    if _params_digest(engine) != base_param_digest:
        raise ContractError("frozen base weights changed during fine-tuning")
    if _file_digest(base_path) != base_file_digest:
        raise ContractError("base checkpoint file changed during fine-tuning")

    save_prefix(out_path, bundle, meta={
        "base": str(base_path),
        "base_digest": base_file_digest,
        "domain": domain,
        "steps": steps,
        "task": "impute",
        "val_mse": history[-1] if history else None,
    })
    return {"prefix": str(out_path), "steps": steps, "history": history}


def inference_prefix(engine: Engine, bundle: PrefixBundle, domain=None) -> PrefixKV:
    """Constant (non-trainable) prefix for serving."""
    idx = engine.embed.domain_index(domain if engine.cfg.domains else None)
    k_vec = N.constant(engine.embed.domain_table.data[idx].copy())
    packed = combine_prefix(bundle.prompt.detach(),
                            domain_transfer(bundle, k_vec).detach(), bundle.beta)
    return PrefixKV.from_packed(packed.detach())


# ---------------------------------------------------------------------------
# inter-variable prefix network


@dataclass
class InterVarPrefixNet:
    """Per-variable tokenizer plus a lightweight transformer stack; each
    stack layer's hidden state maps to that backbone layer's (key, value)."""

    tok_w: N.Tensor  # (T, d_light)
    tok_b: N.Tensor  # (d_light,)
    blocks: list  # lightweight transformer layers at width d_light
    maps: list  # per layer: (w (d_light, 2*D), b (2*D,))
    heads: int

    def named(self) -> dict:
        out = {"intervar.tok_w": self.tok_w, "intervar.tok_b": self.tok_b}
        for i, blk in enumerate(self.blocks):
            for key, tensor in blk.items():
                out[f"intervar.block{i}.{key}"] = tensor
        for i, (w, b) in enumerate(self.maps):
            out[f"intervar.map{i}.w"] = w
            out[f"intervar.map{i}.b"] = b
        return out


def init_intervar_net(rng, window_length, layers, plm_width, d_light=None,
                      dtype=np.float32) -> InterVarPrefixNet:
    d_light = d_light or max(4, plm_width // 4)
    heads = 2 if d_light % 2 == 0 else 1
    f = 4 * d_light

    def xavier(i, o):
        return xavier_uniform(rng, i, o, dtype)

    blocks = []
    maps = []
    for _ in range(layers):
        blocks.append({
            "ln1_g": N.parameter(np.ones(d_light, dtype=dtype)),
            "ln1_b": N.parameter(np.zeros(d_light, dtype=dtype)),
            "attn_w": N.parameter(xavier(d_light, 3 * d_light)),
            "attn_b": N.parameter(np.zeros(3 * d_light, dtype=dtype)),
            "proj_w": N.parameter(xavier(d_light, d_light)),
            "proj_b": N.parameter(np.zeros(d_light, dtype=dtype)),
            "ln2_g": N.parameter(np.ones(d_light, dtype=dtype)),
            "ln2_b": N.parameter(np.zeros(d_light, dtype=dtype)),
            "fc_w": N.parameter(xavier(d_light, f)),
            "fc_b": N.parameter(np.zeros(f, dtype=dtype)),
            "out_w": N.parameter(xavier(f, d_light)),
            "out_b": N.parameter(np.zeros(d_light, dtype=dtype)),
        })
        maps.append((
            N.parameter(xavier(d_light, 2 * plm_width)),
            N.parameter(np.zeros(2 * plm_width, dtype=dtype)),
        ))
    return InterVarPrefixNet(
        tok_w=N.parameter(xavier(window_length, d_light)),
        tok_b=N.parameter(np.zeros(d_light, dtype=dtype)),
        blocks=blocks,
        maps=maps,
        heads=heads,
    )


def intervar_prefix(net: InterVarPrefixNet, block_values: np.ndarray) -> N.Tensor:
    """Per-layer, per-variable prefixes from a (V, T) multivariate block.

    Attention here is bidirectional over the V variable tokens with no
    position embedding, so outputs are equivariant under variable
    permutation.  Returns (Layer, V, 2, D).
    """
    x = np.atleast_2d(np.asarray(block_values))
    v, _ = x.shape
    d_light = net.tok_w.data.shape[1]
    heads = net.heads
    hd = d_light // heads
    dtype = net.tok_w.data.dtype

    z = N.add(N.matmul(N.constant(x.astype(dtype)), net.tok_w), net.tok_b)  # (V, dl)
    per_layer = []
    for blk, (map_w, map_b) in zip(net.blocks, net.maps):
        h = N.layer_norm(z, blk["ln1_g"], blk["ln1_b"])
        qkv = N.add(N.matmul(h, blk["attn_w"]), blk["attn_b"])
        q = N.transpose(N.reshape(N.take_slice(qkv, (Ellipsis, slice(0, d_light))), (v, heads, hd)), (1, 0, 2))
        k = N.transpose(N.reshape(N.take_slice(qkv, (Ellipsis, slice(d_light, 2 * d_light))), (v, heads, hd)), (1, 0, 2))
        val = N.transpose(N.reshape(N.take_slice(qkv, (Ellipsis, slice(2 * d_light, 3 * d_light))), (v, heads, hd)), (1, 0, 2))
        scores = N.mul(N.matmul(q, N.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(hd))
        probs = N.softmax(scores, axis=-1)
        ctx = N.reshape(N.transpose(N.matmul(probs, val), (1, 0, 2)), (v, d_light))
        z = N.add(z, N.add(N.matmul(ctx, blk["proj_w"]), blk["proj_b"]))
        m = N.layer_norm(z, blk["ln2_g"], blk["ln2_b"])
        ffn = N.add(N.matmul(N.gelu(N.add(N.matmul(m, blk["fc_w"]), blk["fc_b"])), blk["out_w"]), blk["out_b"])
        z = N.add(z, ffn)
        kv = N.add(N.matmul(z, map_w), map_b)  # (V, 2*D)
        per_layer.append(N.reshape(kv, (1, v, 2, kv.data.shape[1] // 2)))
    return N.concat(per_layer, axis=0)  # (Layer, V, 2, D)


# ---------------------------------------------------------------------------
# forecasting conversion


@dataclass
class ForecastHead:
    pad: N.Tensor  # (D,), replicated per appended future patch
    head_w: N.Tensor  # (M*D, M*P)
    head_b: N.Tensor  # (M*P,)
    horizon: int

    def named(self) -> dict:
        return {"forecast.pad": self.pad, "forecast.head_w": self.head_w,
                "forecast.head_b": self.head_b}


def init_forecast_head(rng, width, patch_length, horizon, dtype=np.float32) -> ForecastHead:
    if horizon < 1:
        raise ConfigError("forecast horizon must be >= 1")
    return ForecastHead(
        pad=N.parameter(rng.normal(0, 0.02, width).astype(dtype)),
        head_w=N.parameter(xavier_uniform(rng, horizon * width, horizon * patch_length, dtype)),
        head_b=N.parameter(np.zeros(horizon * patch_length, dtype=dtype)),
        horizon=horizon,
    )


def forecast_forward(engine: Engine, head: ForecastHead, values_norm, mask,
                     domain_indices, prefix=None) -> N.Tensor:
    """Normalized forecasts, (B, M*P), from normalized input windows."""
    values_norm = np.atleast_2d(values_norm)
    b = values_norm.shape[0]
    m = head.horizon
    if engine.cfg.seq_len + m > engine.cfg.max_seq:
        raise ConfigError(
            f"sequence {engine.cfg.seq_len}+{m} exceeds max_seq {engine.cfg.max_seq}"
        )
    pads = N.broadcast_to(N.reshape(head.pad, (1, 1, engine.cfg.width)),
                          (b, m, engine.cfg.width))
    hidden, _ = engine.forward_norm(values_norm, mask, domain_indices,
                                    prefix=prefix, extra_tokens=pads)
    t = hidden.final.data.shape[1]
    tail = N.take_slice(hidden.final, (slice(None), slice(t - m, t), slice(None)))
    flat = N.reshape(tail, (b, m * engine.cfg.width))
    return N.add(N.matmul(flat, head.head_w), head.head_b)


def forecast_pairs(series, window_length, horizon_points, stride=1, variables=None):
    """(input window, future target) training pairs per variable."""
    from .data import SeriesWindow

    wanted = list(series.variables) if variables is None else list(variables)
    col = {name: i for i, name in enumerate(series.variables)}
    pairs = []
    t = series.length
    for name in wanted:
        v = col[name]
        last = t - window_length - horizon_points
        for start in range(0, last + 1, stride):
            w = SeriesWindow(
                series.values[start : start + window_length, v],
                series.mask[start : start + window_length, v],
                variable=name, domain=series.domain, start=start,
            )
            target = series.values[start + window_length : start + window_length + horizon_points, v]
            target_mask = series.mask[start + window_length : start + window_length + horizon_points, v]
            pairs.append((w, target, target_mask))
    return pairs


def _forecast_trainable(engine: Engine, bundle: PrefixBundle, head: ForecastHead) -> dict:
    """Prefix machinery, padding/output head, position embeddings, and layer
    norms train; attention/FFN/tokenizer weights stay frozen."""
    trainable = dict(bundle.named())
    trainable.update(head.named())
    trainable["backbone.wpe"] = engine.backbone.wpe
    trainable["backbone.lnf_g"] = engine.backbone.lnf_g
    trainable["backbone.lnf_b"] = engine.backbone.lnf_b
    for i, blk in enumerate(engine.backbone.blocks):
        for key in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            trainable[f"backbone.block{i}.{key}"] = blk[key]
    return trainable


def forecast_finetune(base_path, pairs, cfg: TrainConfig, out_path, horizon=1,
                      domain=None, val_fraction=0.2) -> dict:
    """Convert a trained imputer into a forecaster; emits a full checkpoint."""
    if not pairs:
        raise ConfigError("no forecast training pairs")
    engine = Engine.load(base_path)
    rng = np.random.default_rng(cfg.seed)
    dtype = engine.embed.patch_w.data.dtype
    bundle = init_prefix_bundle(rng, engine.cfg.layers, engine.cfg.width, dtype=dtype)
    head = init_forecast_head(rng, engine.cfg.width, engine.cfg.patch_length,
                              horizon, dtype=dtype)
    k_idx = engine.embed.domain_index(domain if engine.cfg.domains else None)
    k_vec = N.constant(engine.embed.domain_table.data[k_idx].copy())

    n_val = max(1, int(len(pairs) * val_fraction)) if len(pairs) > 4 else 0
    train_pairs = pairs[: len(pairs) - n_val]
    val_pairs = pairs[len(pairs) - n_val :]

    trainable = _forecast_trainable(engine, bundle, head)
    optimizer = Adam(trainable, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                     eps=cfg.adam_eps)

    def batch_loss(batch):
        vals = np.array([p[0].values for p in batch])
        masks = np.array([p[0].mask for p in batch])
        norm = np.zeros_like(vals)
        targets = np.zeros((len(batch), horizon * engine.cfg.patch_length))
        weights = np.array([p[2] for p in batch])
        for i, (w, target, _) in enumerate(batch):
            norm[i], st = revin_normalize(vals[i] * masks[i], masks[i])
            targets[i] = (target - st.mean) / (st.std + st.eps)
        idx = np.full(len(batch), k_idx, dtype=np.int64)
        prefix = bundle_prefix_kv(bundle, k_vec)
        out = forecast_forward(engine, head, norm, masks, idx, prefix=prefix)
        return mse_loss(out, targets, weights if (weights == 0).any() else None)

    steps = 0
    history = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng((cfg.seed, epoch)).permutation(len(train_pairs))
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train_pairs[i] for i in order[lo : lo + cfg.batch_size]]
            loss = batch_loss(batch)
            if not np.isfinite(loss.data).all():
                raise NumericError("non-finite forecasting loss")
            optimizer.zero_grad()
            N.backward(loss)
            optimizer.step()
            steps += 1
        if val_pairs:
            history.append(float(batch_loss(val_pairs).data))

    arrays = {k: v.data for k, v in engine.params().items()}
    arrays.update({k: v.data for k, v in bundle.named().items()})
    arrays.update({k: v.data for k, v in head.named().items()})
    N.save_tensors(out_path, arrays)
    record = {
        "model": engine.config_dict(),
        "precision": engine.precision,
        "task": "forecast",
        "horizon": horizon,
        "beta": bundle.beta,
        "domain": domain,
        "steps": steps,
        "val_mse": history[-1] if history else None,
    }
    tmp = f"{out_path}.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
    os.replace(tmp, f"{out_path}.json")
    return {"checkpoint": str(out_path), "steps": steps, "history": history}


def load_forecaster(path):
    """(engine, bundle, head, horizon) from a forecast checkpoint."""
    meta = Engine.read_meta(path)
    if meta.get("task") != "forecast":
        raise ConfigError(f"{path}: checkpoint task is {meta.get('task')!r}, not 'forecast'")
    engine = Engine.load(path)
    arrays = N.load_tensors(path)
    bundle = PrefixBundle(
        prompt=N.parameter(arrays["prefix.prompt"]),
        dt_w1=N.parameter(arrays["prefix.dt_w1"]),
        dt_b1=N.parameter(arrays["prefix.dt_b1"]),
        dt_w2=N.parameter(arrays["prefix.dt_w2"]),
        dt_b2=N.parameter(arrays["prefix.dt_b2"]),
        beta=meta.get("beta", DEFAULT_BETA),
    )
    horizon = int(meta["horizon"])
    head = ForecastHead(
        pad=N.parameter(arrays["forecast.pad"]),
        head_w=N.parameter(arrays["forecast.head_w"]),
        head_b=N.parameter(arrays["forecast.head_b"]),
        horizon=horizon,
    )
    return engine, bundle, head, horizon


def forecast(engine: Engine, bundle: PrefixBundle, head: ForecastHead,
             values, mask, domain=None) -> np.ndarray:
    """Raw-scale forecast of the next horizon * patch_length points."""
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    norm, stats = revin_normalize(values * mask, mask)
    idx = np.array([engine.embed.domain_index(domain if engine.cfg.domains else None)])
    prefix = inference_prefix(engine, bundle, domain)
    out = forecast_forward(engine, head, norm[None], mask[None], idx, prefix=prefix)
    return revin_denormalize(out.data[0].astype(np.float64), stats)
