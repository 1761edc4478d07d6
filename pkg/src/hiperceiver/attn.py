"""Attention primitives, the grouped HiP block and its cost accounting."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import ParamStore, Tensor
from .tokens import ConfigError, check_divisible

CROSS_MLP_EXPANSION = 1
SELF_MLP_EXPANSION = 4


@dataclass(frozen=True)
class BlockConfig:
    groups: int
    latents: int  # per group
    channels: int
    heads: int
    self_attn_layers: int

    @property
    def out_tokens(self) -> int:
        return self.groups * self.latents

    def validate(self) -> None:
        if min(self.groups, self.latents, self.channels, self.heads) < 1 or self.self_attn_layers < 0:
            raise ConfigError(f"non-positive extent in {self}")
        if self.channels % self.heads:
            raise ConfigError(f"{self.channels} channels not divisible by {self.heads} heads")


# ---------------------------------------------------------------------------
# parameters


def init_layer_norm(store: ParamStore, prefix: str, dim: int) -> None:
    store.add(f"{prefix}.g", (dim,), init="ones")
    store.add(f"{prefix}.b", (dim,), init="zeros")


def init_attention(store: ParamStore, prefix: str, q_dim: int, kv_dim: int | None, rng, zero_out: bool = False) -> None:
    """Projections for attention from a ``q_dim`` stream onto a ``kv_dim`` stream.

    ``kv_dim=None`` means self-attention (one shared input norm).
    """
    init_layer_norm(store, f"{prefix}.ln_q", q_dim)
    if kv_dim is not None:
        init_layer_norm(store, f"{prefix}.ln_kv", kv_dim)
    src = q_dim if kv_dim is None else kv_dim
    for name, cin in (("q", q_dim), ("k", src), ("v", src)):
        store.add(f"{prefix}.{name}.w", (cin, q_dim), rng)
        store.add(f"{prefix}.{name}.b", (q_dim,), init="zeros")
    store.add(f"{prefix}.o.w", (q_dim, q_dim), rng, init="zeros" if zero_out else "normal")
    store.add(f"{prefix}.o.b", (q_dim,), init="zeros")


def init_mlp(store: ParamStore, prefix: str, dim: int, expansion: int, rng, zero_out: bool = True) -> None:
    init_layer_norm(store, f"{prefix}.ln", dim)
    store.add(f"{prefix}.w1", (dim, dim * expansion), rng)
    store.add(f"{prefix}.b1", (dim * expansion,), init="zeros")
    store.add(f"{prefix}.w2", (dim * expansion, dim), rng, init="zeros" if zero_out else "normal")
    store.add(f"{prefix}.b2", (dim,), init="zeros")


# ---------------------------------------------------------------------------
# forward pieces


def _ln(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    return nx.layer_norm(x, store[f"{prefix}.g"], store[f"{prefix}.b"])


def _lin(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    return nx.linear(x, store[f"{prefix}.w"], store[f"{prefix}.b"])


def attend(q_in: Tensor, kv_in: Tensor | None, store: ParamStore, prefix: str, heads: int) -> Tensor:
    """Pre-norm multi-head attention branch (no residual).

    ``q_in`` is ``(..., Nq, D)``; ``kv_in`` is ``(..., Nk, Dkv)`` or ``None``
    for self-attention.
    """
    with nx.mac_scope("attn"):
        qn = _ln(q_in, store, f"{prefix}.ln_q")
        kvn = qn if kv_in is None else _ln(kv_in, store, f"{prefix}.ln_kv")
        q = _lin(qn, store, f"{prefix}.q")
        k = _lin(kvn, store, f"{prefix}.k")
        v = _lin(kvn, store, f"{prefix}.v")
        return _lin(nx.attention(q, k, v, heads), store, f"{prefix}.o")


def mha(q_in: Tensor, kv_in: Tensor | None, store: ParamStore, prefix: str, heads: int) -> Tensor:
    """Multi-head attention with the residual added on the query stream."""
    return nx.add(q_in, attend(q_in, kv_in, store, prefix, heads))


def mlp(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """Pre-norm GELU MLP branch (no residual)."""
    with nx.mac_scope("mlp"):
        h = nx.linear(_ln(x, store, f"{prefix}.ln"), store[f"{prefix}.w1"], store[f"{prefix}.b1"])
        return nx.linear(nx.gelu(h), store[f"{prefix}.w2"], store[f"{prefix}.b2"])


def stochastic_depth(delta: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Drop a residual branch per example with probability ``rate``.

    Survivors are scaled by ``1/(1-rate)``; evaluation mode is the identity.
    The leading axis of ``delta`` is the example axis.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return delta
    keep = (rng.random(delta.shape[0]) >= rate).astype(np.float64) / (1.0 - rate)
    return nx.mul_const(delta, keep.reshape(-1, *([1] * (delta.ndim - 1))))


@dataclass
class BlockParams:
    """View of one block's parameters inside a shared :class:`ParamStore`."""

    store: ParamStore
    prefix: str
    config: BlockConfig
    in_channels: int

    @property
    def latents(self) -> Tensor:
        return self.store[f"{self.prefix}.latents"]

    def num_params(self) -> int:
        return self.store.num_params(self.prefix + ".")

    def shared_params(self) -> int:
        return self.num_params() - self.latents.size


def init_block(store: ParamStore, prefix: str, cfg: BlockConfig, in_channels: int, rng) -> BlockParams:
    cfg.validate()
    d = cfg.channels
    store.add(f"{prefix}.latents", (cfg.groups, cfg.latents, d), rng)
    init_attention(store, f"{prefix}.cross", d, in_channels, rng)
    init_mlp(store, f"{prefix}.cross_mlp", d, CROSS_MLP_EXPANSION, rng)
    for layer in range(cfg.self_attn_layers):
        init_attention(store, f"{prefix}.self{layer}", d, None, rng, zero_out=True)
        init_mlp(store, f"{prefix}.self{layer}_mlp", d, SELF_MLP_EXPANSION, rng)
    return BlockParams(store, prefix, cfg, in_channels)


def hip_block(x: Tensor, params: BlockParams, training: bool = False, drop_rate: float = 0.0,
              rng: np.random.Generator | None = None, scope: str | None = None) -> Tensor:
    """Group, cross-attend latents, run the self-attention stack, merge.

    ``x`` is ``(M, C)`` or ``(B, M, C)``; the result is ``(G*K, D)`` or
    ``(B, G*K, D)`` respectively.
    """
    cfg, store, p = params.config, params.store, params.prefix
    squeeze = x.ndim == 2
    if squeeze:
        x = nx.reshape(x, (1, *x.shape))
    b, m, c = x.shape
    if c != params.in_channels:
        raise ConfigError(f"{p}: expected {params.in_channels} input channels, got {c}")
    size = check_divisible(m, cfg.groups)
    g, k, d = cfg.groups, cfg.latents, cfg.channels
    with nx.mac_scope(scope or p):
        xg = nx.reshape(x, (b, g, size, c))
        z = nx.broadcast_to(params.latents, (b, g, k, d))
        with nx.mac_scope("cross"):
            z = mha(z, xg, store, f"{p}.cross", cfg.heads)
            z = nx.add(z, mlp(z, store, f"{p}.cross_mlp"))
        for layer in range(cfg.self_attn_layers):
            with nx.mac_scope(f"self{layer}"):
                delta = attend(z, None, store, f"{p}.self{layer}", cfg.heads)
                z = nx.add(z, stochastic_depth(delta, drop_rate, training, rng))
                delta = mlp(z, store, f"{p}.self{layer}_mlp")
                z = nx.add(z, stochastic_depth(delta, drop_rate, training, rng))
        out = nx.reshape(z, (b, g * k, d))
    return nx.reshape(out, (g * k, d)) if squeeze else out


# ---------------------------------------------------------------------------
# cost accounting

COST_OPS = ("cross_proj", "cross_score", "cross_value", "cross_mlp",
            "self_proj", "self_score", "self_value", "self_mlp")


def block_costs(cfg: BlockConfig, tokens_in: int, in_channels: int) -> dict[str, int]:
    """Forward multiply-accumulates of one block for a single example."""
    g, k, d = cfg.groups, cfg.latents, cfg.channels
    check_divisible(tokens_in, g)
    n_lat = g * k
    layers = cfg.self_attn_layers
    return {
        "cross_proj": 2 * n_lat * d * d + 2 * tokens_in * in_channels * d,
        "cross_score": tokens_in * k * d,
        "cross_value": tokens_in * k * d,
        "cross_mlp": 2 * n_lat * d * d * CROSS_MLP_EXPANSION,
        "self_proj": layers * 4 * n_lat * d * d,
        "self_score": layers * g * k * k * d,
        "self_value": layers * g * k * k * d,
        "self_mlp": layers * 2 * n_lat * d * d * SELF_MLP_EXPANSION,
    }


@dataclass
class CostReport:
    """Per-block MAC tallies keyed by block label, then operation."""

    blocks: dict[str, dict[str, int]] = field(default_factory=dict)
    layers: dict[str, int] = field(default_factory=dict)

    def block_total(self, block: str) -> int:
        return sum(self.blocks[block].values())

    @property
    def total(self) -> int:
        return sum(self.block_total(b) for b in self.blocks)

    def op_total(self, op: str) -> int:
        return sum(ops.get(op, 0) for ops in self.blocks.values())

    def cross_score_macs(self, block: str) -> int:
        return self.blocks[block]["cross_score"]

    def cross_value_macs(self, block: str) -> int:
        return self.blocks[block]["cross_value"]

    def self_attn_macs_per_layer(self, block: str) -> int:
        n = self.layers.get(block, 0)
        ops = self.blocks[block]
        return 0 if n == 0 else (ops["self_score"] + ops["self_value"]) // n

    def mlp_macs(self, block: str) -> int:
        return self.blocks[block]["cross_mlp"] + self.blocks[block]["self_mlp"]

    def rows(self) -> list[tuple[str, str, int]]:
        out = [(b, op, macs) for b, ops in self.blocks.items() for op, macs in ops.items()]
        out += [(b, "total", self.block_total(b)) for b in self.blocks]
        out.append(("model", "total", self.total))
        return out

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["block", "operation", "macs"])
            w.writerows(self.rows())
        return path

    @classmethod
    def from_counter(cls, counter: nx.MacCounter) -> "CostReport":
        """Fold instrumented counts (scopes ``block/cross|selfN/attn|mlp``) into a report."""
        blocks: dict[str, dict[str, int]] = defaultdict(lambda: dict.fromkeys(COST_OPS, 0))
        layers: dict[str, set] = defaultdict(set)
        for (scope, kind), macs in counter.counts.items():
            parts = scope.split("/")
            if len(parts) < 3:
                raise ValueError(f"unscoped multiply in {scope!r} ({kind})")
            block, stage, sub = parts[-3], parts[-2], parts[-1]
            stem = "cross" if stage == "cross" else "self"
            if stem == "self":
                layers[block].add(stage)
            if sub == "mlp":
                op = f"{stem}_mlp"
            else:
                op = {"linear": f"{stem}_proj", "score": f"{stem}_score", "value": f"{stem}_value"}[kind]
            blocks[block][op] += macs
        return cls({b: dict(v) for b, v in blocks.items()}, {b: len(s) for b, s in layers.items()})


def count_costs(config, tokens: int, labels: list[str] | None = None) -> CostReport:
    """Analytic MAC counts for every block of ``config`` at ``tokens`` inputs.

    ``config`` needs ``blocks`` (a list of :class:`BlockConfig`) and
    ``input_channels``.
    """
    report = CostReport()
    m, c = tokens, config.input_channels
    for i, cfg in enumerate(config.blocks):
        label = labels[i] if labels else f"block{i}"
        try:
            report.blocks[label] = block_costs(cfg, m, c)
        except ConfigError as exc:
            raise ConfigError(f"block {i}: {exc}") from None
        report.layers[label] = cfg.self_attn_layers
        m, c = cfg.out_tokens, cfg.channels
    return report
