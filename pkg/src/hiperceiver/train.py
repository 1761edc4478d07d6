"""AdamW with warmup plus cosine decay, and the MAE / classification / segmentation training loops.

Batch composition, masks and stochastic-depth draws are all keyed by
``(seed, step)``, so a loop resumed from a checkpoint replays exactly the
batches the uninterrupted run would have seen.
"""
from __future__ import annotations

import csv
import math
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import Dataset
from .mae import MaskSpec, corrupt, mae_loss, sample_mask
from .model import Model, classify, decode_bottleneck_dense, decode_dense, encode, load_params
from .numerics import ParamStore

VAL_MASK_STEP = 2**31 - 1  # fixed mask stream for validation
_DECAY = re.compile(r"\.w\d?$")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Schedule:
    base_lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 1000


def lr_at(step: int, sched: Schedule) -> float:
    """Linear ramp from 0 over the warmup, then half-cosine decay to 0 at ``total_steps``."""
    if step < sched.warmup_steps:
        return sched.base_lr * step / sched.warmup_steps
    span = max(sched.total_steps - sched.warmup_steps, 1)
    progress = min((step - sched.warmup_steps) / span, 1.0)
    return sched.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    base_lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    clip_norm: float = 1.0
    drop_rate: float = 0.0  # stochastic depth, supervised fine-tuning only
    seed: int = 0
    eval_every: int = 250
    val_examples: int = 64

    def schedule(self) -> Schedule:
        return Schedule(self.base_lr, self.warmup_steps, self.steps)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    schedule: Schedule
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    rejected: list[int] = field(default_factory=list)
    history: list[float] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: ParamStore, cfg: TrainConfig) -> "TrainState":
        st = cls(cfg.schedule(), cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
        for name, t in params.items():
            st.m[name] = np.zeros_like(t.data)
            st.v[name] = np.zeros_like(t.data)
        return st

    def to_records(self) -> dict[str, np.ndarray]:
        rec = {f"m/{k}": a for k, a in self.m.items()}
        rec.update({f"v/{k}": a for k, a in self.v.items()})
        rec["state/step"] = np.array([self.step], dtype=np.float32)
        return rec

    def load_records(self, rec: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k] = rec[f"m/{k}"].astype(self.m[k].dtype)
            self.v[k] = rec[f"v/{k}"].astype(self.v[k].dtype)
        self.step = int(rec["state/step"][0])


def decays(name: str) -> bool:
    """Weight decay applies to projection and MLP matrices only."""
    return bool(_DECAY.search(name))


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``; returns the norm before clipping."""
    grads = [t.grad for t in params.values() if t.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def adamw_step(params: ParamStore, state: TrainState, lr: float) -> bool:
    """One decoupled-decay Adam update; returns False (and records the step) if any gradient is non-finite."""
    for name, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            state.rejected.append(state.step)
            state.step += 1
            return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and decays(name):
            update += state.weight_decay * t.data
        t.data -= (lr * update).astype(t.data.dtype)
    return True


# ---------------------------------------------------------------------------
# logging and checkpoints


class MetricsLog:
    """Append-only CSV with columns ``step, split, metric, value``."""

    HEADER = ("step", "split", "metric", "value")

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.rows: list[tuple] = []
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(self.HEADER)

    def log(self, step: int, split: str, metric: str, value: float) -> None:
        row = (int(step), split, metric, repr(float(value)))
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow(row)

    def last(self, split: str, metric: str) -> float | None:
        for row in reversed(self.rows):
            if row[1] == split and row[2] == metric:
                return float(row[3])
        return None


def save_training(path: str | Path, model: Model, state: TrainState, run: dict | None = None) -> Path:
    config = {"model": model.config.to_dict(), "run": run or {}}
    return save_checkpoint(path, model.params.arrays(), state.to_records(), config)


def restore_training(path: str | Path, model: Model, state: TrainState | None = None) -> dict | None:
    """Load parameters (and optimizer state when given) in place; returns the stored config."""
    params, opt, config = load_checkpoint(path)
    model.params.load_arrays(params)
    if state is not None:
        state.load_records(opt)
    return config


def init_from_checkpoint(model: Model, path: str | Path) -> list[str]:
    """Copy every shape-compatible parameter from a checkpoint; returns the names left at init."""
    params, _, _ = load_checkpoint(path)
    return load_params(model, params)


# ---------------------------------------------------------------------------
# loops


def _batch_indices(n: int, batch: int, seed: int, step: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C, step]))
    return np.sort(rng.choice(n, batch, replace=batch > n))


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x5D, step]))


def _optimize(model: Model, state: TrainState, cfg: TrainConfig, loss: nx.Tensor, log: MetricsLog | None) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became {value} at step {state.step} "
                               f"(lr {lr_at(state.step, state.schedule):.3g}, recent losses {state.history[-5:]})")
    loss.backward()
    norm = clip_grad_norm(model.params, cfg.clip_norm)
    lr = lr_at(state.step, state.schedule)
    if not adamw_step(model.params, state, lr) and log:
        log.log(state.step, "train", "rejected_step", 1.0)
    model.params.zero_grad()
    state.history.append(value)
    if log:
        log.log(state.step, "train", "loss", value)
        log.log(state.step, "train", "grad_norm", norm)
    return value


def _val_positions(ds: Dataset, n: int) -> list[np.ndarray]:
    total = min(n, len(ds))
    return [np.arange(i, min(i + 16, total)) for i in range(0, total, 16)]


def mae_forward(model: Model, x: np.ndarray, segments, masks, mode: str) -> nx.Tensor:
    """Embed, hide, encode, decode at the masked positions and score them."""
    b, m, _ = x.shape
    emb = model.embed(x, segments)
    if mode == "uniform":
        hidden = corrupt(emb, masks, mask_token=model.params["mask_token"], pos=model.position_rows(tokens=m))
    else:
        hidden = corrupt(emb, masks)
    trace = encode(model, hidden)
    positions = np.stack([mk.masked for mk in masks])
    out = decode_dense(model, trace, model.position_rows(positions), positions, m)
    return mae_loss(out, x, masks)


def mae_val_loss(model: Model, ds: Dataset, spec: MaskSpec, n: int = 64) -> float:
    """Mean masked MSE over the first ``n`` examples of ``ds`` with a fixed mask stream."""
    total, count = 0.0, 0
    with nx.no_grad():
        for pos in _val_positions(ds, n):
            x, _, segs = ds.batch(pos)
            masks = [sample_mask(x.shape[1], spec, ds.indices[int(i)], VAL_MASK_STEP) for i in pos]
            total += mae_forward(model, x, segs, masks, spec.mode).item() * len(pos)
            count += len(pos)
    return total / max(count, 1)


def pretrain_mae(model: Model, train: Dataset, val: Dataset | None, spec: MaskSpec, cfg: TrainConfig,
                 log: MetricsLog | None = None, state: TrainState | None = None,
                 on_eval: Callable[[int, float], bool] | None = None) -> TrainState:
    """Masked auto-encoding for ``cfg.steps`` optimizer steps (resuming from ``state.step``).

    ``on_eval(step, val_loss)`` may return True to stop early.
    """
    state = state or TrainState.for_params(model.params, cfg)
    m = train.item(0)[0].num_tokens
    while state.step < cfg.steps:
        step = state.step
        pos = _batch_indices(len(train), cfg.batch_size, cfg.seed, step)
        x, _, segs = train.batch(pos)
        masks = [sample_mask(m, spec, train.indices[int(i)], step) for i in pos]
        _optimize(model, state, cfg, mae_forward(model, x, segs, masks, spec.mode), log)
        if val is not None and (state.step % cfg.eval_every == 0 or state.step == cfg.steps):
            loss = mae_val_loss(model, val, spec, cfg.val_examples)
            if log:
                log.log(state.step, "val", "loss", loss)
            if on_eval and on_eval(state.step, loss):
                break
    return state


def accuracy(model: Model, ds: Dataset, n: int | None = None) -> float:
    correct = total = 0
    with nx.no_grad():
        for pos in _val_positions(ds, n or len(ds)):
            x, y, segs = ds.batch(pos)
            logits = classify(model, encode(model, model.embed(x, segs))).data
            correct += int((logits.argmax(axis=1) == y).sum())
            total += len(pos)
    return correct / max(total, 1)


def finetune_classify(model: Model, train: Dataset, val: Dataset, cfg: TrainConfig,
                      log: MetricsLog | None = None, state: TrainState | None = None) -> float:
    """Cross-entropy on the class head with stochastic depth; returns held-out top-1 accuracy."""
    if train.spec.num_classes > model.config.num_classes:
        raise ValueError(f"dataset has {train.spec.num_classes} classes, head has {model.config.num_classes}")
    state = state or TrainState.for_params(model.params, cfg)
    while state.step < cfg.steps:
        step = state.step
        x, y, segs = train.batch(_batch_indices(len(train), cfg.batch_size, cfg.seed, step))
        trace = encode(model, model.embed(x, segs), training=True, drop_rate=cfg.drop_rate,
                       rng=_step_rng(cfg.seed, step))
        _optimize(model, state, cfg, nx.cross_entropy(classify(model, trace), y), log)
        if state.step % cfg.eval_every == 0 and state.step < cfg.steps and log:
            log.log(state.step, "val", "accuracy", accuracy(model, val, cfg.val_examples))
    acc = accuracy(model, val)
    if log:
        log.log(state.step, "val", "accuracy", acc)
    return acc


def miou(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Mean over classes (those present in prediction or truth) of intersection over union."""
    pred, labels = np.asarray(pred).ravel(), np.asarray(labels).ravel()
    if pred.shape != labels.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match labels {labels.shape}")
    ious = []
    for c in range(num_classes):
        p, t = pred == c, labels == c
        union = np.count_nonzero(p | t)
        if union:
            ious.append(np.count_nonzero(p & t) / union)
    return float(np.mean(ious)) if ious else 1.0


def dense_logits(model: Model, x: np.ndarray, segments, decoder: str = "full", training: bool = False,
                 drop_rate: float = 0.0, rng=None) -> nx.Tensor:
    """Per-token outputs ``(B, M, out_channels)`` with positional queries at every token."""
    b, m, _ = x.shape
    trace = encode(model, model.embed(x, segments), training, drop_rate, rng)
    queries = nx.broadcast_to(model.position_rows(tokens=m), (b, m, model.d_pos))
    if decoder == "full":
        return decode_dense(model, trace, queries, None, m, training, drop_rate, rng)
    if decoder == "bottleneck":
        return decode_bottleneck_dense(model, trace, queries)
    raise ValueError(f"unknown decoder {decoder!r}; use 'full' or 'bottleneck'")


def segmentation_miou(model: Model, ds: Dataset, decoder: str, n: int | None = None) -> float:
    preds, labels = [], []
    with nx.no_grad():
        for pos in _val_positions(ds, n or len(ds)):
            x, y, segs = ds.batch(pos)
            preds.append(dense_logits(model, x, segs, decoder).data.argmax(axis=-1))
            labels.append(y)
    return miou(np.concatenate(preds), np.concatenate(labels), model.config.out_channels)


def finetune_dense(model: Model, train: Dataset, val: Dataset, cfg: TrainConfig, decoder: str = "full",
                   log: MetricsLog | None = None, state: TrainState | None = None) -> float:
    """Per-token cross-entropy through the chosen decoder; returns held-out mIoU."""
    c = model.config.out_channels
    state = state or TrainState.for_params(model.params, cfg)
    while state.step < cfg.steps:
        step = state.step
        x, y, segs = train.batch(_batch_indices(len(train), cfg.batch_size, cfg.seed, step))
        if y.shape != x.shape[:2]:
            raise ValueError(f"labels {y.shape} do not match the token grid {x.shape[:2]}")
        out = dense_logits(model, x, segs, decoder, True, cfg.drop_rate, _step_rng(cfg.seed, step))
        loss = nx.cross_entropy(nx.reshape(out, (-1, c)), y.reshape(-1))
        _optimize(model, state, cfg, loss, log)
        if state.step % cfg.eval_every == 0 and state.step < cfg.steps and log:
            log.log(state.step, "val", "miou", segmentation_miou(model, val, decoder, cfg.val_examples))
    score = segmentation_miou(model, val, decoder)
    if log:
        log.log(state.step, "val", "miou", score)
    return score


class Stopwatch:
    def __init__(self):
        self.start = time.perf_counter()

    def __call__(self) -> float:
        return time.perf_counter() - self.start
