"""One-for-all training: dual random masks per window, reconstruction MSE on
both views plus a weighted contrastive term, Adam, early stopping."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as N
from .data import compose_masks, eval_positions, mask_random, revin_normalize
from .engine import Engine
from .errors import ConfigError, ContractError, DegenerateBatchError, NumericError


@dataclass
class TrainConfig:
    alpha: float = 0.1  # contrastive weight; never stated upstream, logged per run
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 20
    patience: int = 3
    mask_rate_min: float = 0.1
    mask_rate_max: float = 0.9
    val_rate: float = 0.5
    seed: int = 0
    precision: str = "32"
    log_path: str | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("contrastive weight must be >= 0")
        if not (0 <= self.mask_rate_min <= self.mask_rate_max <= 1):
            raise ConfigError("mask rate range must satisfy 0 <= lo <= hi <= 1")


# ---------------------------------------------------------------------------
# losses


def mse_loss(output: N.Tensor, target, weight=None) -> N.Tensor:
    """Mean squared error; `weight` restricts the mean to marked positions."""
    target = np.asarray(target)
    if output.data.shape != target.shape:
        raise ContractError(
            f"mse_loss shapes differ: {output.data.shape} vs {target.shape}"
        )
    diff = N.sub(output, N.constant(target.astype(output.data.dtype)))
    if weight is None:
        return N.tmean(N.square(diff))
    w = np.asarray(weight, dtype=output.data.dtype)
    count = float(w.sum())
    if count <= 0:
        raise ContractError("mse_loss weight selects no positions")
    return N.div(N.tsum(N.mul(N.square(diff), N.constant(w))), count)


def infonce_loss(h1: N.Tensor, h2: N.Tensor, w: N.Tensor) -> N.Tensor:
    """Symmetric InfoNCE over aligned representation stacks.

    Queries come from one view; the aligned entry of the other view is the
    positive and every other entry of that view (other patches, other
    windows) is a negative.  Similarity is the bilinear form q . W k with no
    temperature; both view directions are averaged.
    """
    if h1.data.shape != h2.data.shape:
        raise ContractError("contrastive views must align")
    d = h1.data.shape[-1]
    q1 = N.reshape(h1, (-1, d))
    q2 = N.reshape(h2, (-1, d))
    n = q1.data.shape[0]
    if n < 2:
        raise DegenerateBatchError("contrastive batch has no negatives")
    eye = np.eye(n, dtype=h1.data.dtype)

    def one_direction(q, c):
        logits = N.matmul(N.matmul(q, w), N.transpose(c, (1, 0)))
        picked = N.tsum(N.mul(N.log_softmax(logits, axis=1), N.constant(eye)))
        return N.div(N.neg(picked), n)

    return N.mul(N.add(one_direction(q1, q2), one_direction(q2, q1)), 0.5)


# ---------------------------------------------------------------------------
# optimizer


def adam_update(param: N.Tensor, grad: np.ndarray, state: dict, lr: float,
                beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Standard bias-corrected Adam step, in place."""
    if state.get("m") is None:
        state["m"] = np.zeros_like(param.data)
        state["v"] = np.zeros_like(param.data)
        state["t"] = 0
    state["t"] += 1
    g = grad.astype(param.data.dtype)
    state["m"] = beta1 * state["m"] + (1 - beta1) * g
    state["v"] = beta2 * state["v"] + (1 - beta2) * (g * g)
    m_hat = state["m"] / (1 - beta1 ** state["t"])
    v_hat = state["v"] / (1 - beta2 ** state["t"])
    param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Per-parameter moment state over a named trainable subset."""

    def __init__(self, trainable: dict, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.trainable = dict(trainable)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = {name: {} for name in self.trainable}

    def step(self) -> None:
        for name, p in self.trainable.items():
            if p.grad is None:
                continue
            adam_update(p, p.grad, self.state[name], self.lr, self.beta1,
                        self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.trainable.values():
            p.zero_grad()

    def state_arrays(self) -> dict:
        out = {}
        for name, st in self.state.items():
            if st.get("m") is None:
                continue
            out[f"adam.m.{name}"] = st["m"]
            out[f"adam.v.{name}"] = st["v"]
            out[f"adam.t.{name}"] = np.array([st["t"]], dtype=np.float64)
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for name in self.trainable:
            m = arrays.get(f"adam.m.{name}")
            if m is None:
                continue
            self.state[name] = {
                "m": m.astype(self.trainable[name].data.dtype),
                "v": arrays[f"adam.v.{name}"].astype(self.trainable[name].data.dtype),
                "t": int(arrays[f"adam.t.{name}"][0]),
            }


# ---------------------------------------------------------------------------
# batching


@dataclass
class MaskedView:
    """One artificially masked rendering of a batch of windows."""

    norm_values: np.ndarray  # (B, L), zeros at masked positions
    view_mask: np.ndarray  # (B, L), native * artificial
    target_norm: np.ndarray  # (B, L), full series in this view's coordinates
    native_mask: np.ndarray  # (B, L)
    stats: list


def dual_mask_batch(windows, rate_range, seed):
    """Two independently masked views per window, rates uniform in range."""
    lo, hi = rate_range
    rng = np.random.default_rng(seed)
    views = []
    for _ in range(2):
        norm_rows, mask_rows, target_rows, native_rows, stats = [], [], [], [], []
        for w in windows:
            length = len(w.values)
            rate = float(rng.uniform(lo, hi))
            artificial = mask_random(length, rate, rng.integers(0, 2**63 - 1))
            vm = compose_masks(w.mask, artificial)
            masked_vals = w.values * vm
            nv, st = revin_normalize(masked_vals, vm)
            target = (w.values - st.mean) / (st.std + st.eps)
            norm_rows.append(nv)
            mask_rows.append(vm)
            target_rows.append(target)
            native_rows.append(w.mask)
            stats.append(st)
        views.append(MaskedView(
            np.array(norm_rows), np.array(mask_rows), np.array(target_rows),
            np.array(native_rows), stats,
        ))
    return views[0], views[1]


# ---------------------------------------------------------------------------
# steps and loop


def train_step(engine: Engine, windows, optimizer: Adam, cfg: TrainConfig,
               step_seed, rng=None) -> dict:
    """One optimization step over a batch of windows; returns the loss parts."""
    view1, view2 = dual_mask_batch(windows, (cfg.mask_rate_min, cfg.mask_rate_max), step_seed)
    domains = np.array([engine.embed.domain_index(w.domain if engine.cfg.domains else None)
                        for w in windows], dtype=np.int64)
    train_mode = engine.cfg.dropout > 0
    parts = {}
    reps = []
    losses = []
    for tag, view in (("mse1", view1), ("mse2", view2)):
        hidden, out = engine.forward_norm(view.norm_values, view.view_mask, domains,
                                          train=train_mode, rng=rng)
        losses.append(mse_loss(out, view.target_norm, view.native_mask))
        t = hidden.final.data.shape[1]
        reps.append(N.take_slice(hidden.final, (slice(None), slice(2, t), slice(None))))
        parts[tag] = losses[-1].item()

    total = N.add(losses[0], losses[1])
    if cfg.alpha > 0:
        cl = infonce_loss(reps[0], reps[1], engine.contrast_w)
        parts["contrastive"] = cl.item()
        total = N.add(total, N.mul(cl, cfg.alpha))
    else:
        parts["contrastive"] = 0.0
    parts["total"] = total.item()

    if not np.isfinite(parts["total"]):
        ids = sorted({w.variable for w in windows})
        raise NumericError(f"non-finite loss; batch windows from variables {ids}")

    optimizer.zero_grad()
    N.backward(total)
    optimizer.step()
    for name, p in optimizer.trainable.items():
        if not np.isfinite(p.data).all():
            ids = sorted({w.variable for w in windows})
            raise NumericError(
                f"non-finite parameter {name} after update; batch variables {ids}"
            )
    return parts


def fixed_validation_masks(val_windows, rate, seed):
    """One artificial mask per validation window, fixed for the whole run."""
    masks = []
    for i, w in enumerate(val_windows):
        masks.append(mask_random(len(w.values), rate, np.random.default_rng((seed, 7, i)).integers(0, 2**63 - 1)))
    return masks


def validation_mse(engine: Engine, val_windows, val_masks, batch_size=64,
                   prefix=None) -> float:
    """Imputation MSE on artificially masked, natively observed positions."""
    if not val_windows:
        raise ConfigError("validation set is empty")
    total_sq = 0.0
    count = 0
    for lo in range(0, len(val_windows), batch_size):
        chunk = val_windows[lo : lo + batch_size]
        chunk_masks = val_masks[lo : lo + batch_size]
        vals = np.array([w.values for w in chunk])
        native = np.array([w.mask for w in chunk])
        art = np.array(chunk_masks)
        vm = compose_masks(native, art)
        domains = [w.domain if engine.cfg.domains else None for w in chunk]
        _, norm_out, stats = engine.impute_batch(vals * vm, vm, domains, prefix=prefix)
        for i, w in enumerate(chunk):
            pos = eval_positions(native[i], art[i]) > 0
            if not pos.any():
                continue
            target = (w.values - stats[i].mean) / (stats[i].std + stats[i].eps)
            err = norm_out[i][pos] - target[pos]
            total_sq += float((err * err).sum())
            count += int(pos.sum())
    if count == 0:
        raise ConfigError("validation masks select no scorable positions")
    return total_sq / count


@dataclass
class TrainResult:
    checkpoint: str
    epochs_run: int
    best_val_mse: float
    best_epoch: int
    history: list = field(default_factory=list)


def train_loop(engine: Engine, train_windows, val_windows, cfg: TrainConfig,
               out_path, meta=None, resume_state=None) -> TrainResult:
    """Epoch loop with fixed validation masks, early stopping, atomic
    best-checkpoint writes, and a JSONL step/epoch log."""
    if not train_windows:
        raise ConfigError("training set is empty")
    optimizer = Adam(engine.params(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                     eps=cfg.adam_eps)
    start_epoch = 0
    if resume_state:
        arrays = N.load_tensors(resume_state)
        for name, p in engine.params().items():
            if name in arrays:
                p.data = arrays[name].astype(p.data.dtype)
        optimizer.load_state_arrays(arrays)
        start_epoch = int(arrays["epoch"][0])

    val_masks = fixed_validation_masks(val_windows, cfg.val_rate, cfg.seed)
    log_fh = open(cfg.log_path, "a") if cfg.log_path else None

    def log(record):
        if log_fh:
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            log_fh.flush()

    best = np.inf
    best_epoch = -1
    bad_epochs = 0
    history = []
    step = start_epoch * max(1, len(train_windows) // max(1, cfg.batch_size))
    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng((cfg.seed, epoch))
            order = rng.permutation(len(train_windows))
            for lo in range(0, len(order), cfg.batch_size):
                batch = [train_windows[i] for i in order[lo : lo + cfg.batch_size]]
                t0 = time.perf_counter()
                parts = train_step(engine, batch, optimizer, cfg,
                                   step_seed=(cfg.seed, epoch, lo), rng=rng)
                step += 1
                parts.update(step=step, epoch=epoch, val_mse=None,
                             wall_ms=round((time.perf_counter() - t0) * 1e3, 3))
                log(parts)
            val = validation_mse(engine, val_windows, val_masks)
            history.append({"epoch": epoch, "val_mse": val})
            log({"epoch": epoch, "step": step, "val_mse": val,
                 "wall_ms": 0.0, "mse1": None, "mse2": None,
                 "contrastive": None, "total": None})
            if val < best:
                best, best_epoch, bad_epochs = val, epoch, 0
                engine.save(out_path, meta={**(meta or {}), "best_val_mse": best,
                                            "best_epoch": best_epoch})
            else:
                bad_epochs += 1
            state = {k: v.data for k, v in engine.params().items()}
            state.update(optimizer.state_arrays())
            state["epoch"] = np.array([epoch + 1], dtype=np.float64)
            N.save_tensors(f"{out_path}.state", state)
            if bad_epochs >= cfg.patience:
                break
    finally:
        if log_fh:
            log_fh.close()
    if best_epoch < 0:
        raise NumericError("training never produced a finite validation score")
    return TrainResult(str(out_path), len(history), best, best_epoch, history)
