"""Hierarchical encoder-decoder assembled from HiP blocks, plus read-out heads."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .attn import BlockConfig, BlockParams, hip_block, init_attention, init_block, init_layer_norm, init_mlp, mha, mlp
from .embed import ModalityProjector, fourier_features, grid_coords, project_content
from .numerics import ParamStore, Tensor
from .tokens import ConfigError, check_divisible


@dataclass
class ModelConfig:
    blocks: list[BlockConfig]
    input_channels: int  # d_pos: width of projected inputs and positional codes
    bottleneck_index: int | None = None
    name: str = "custom"
    modalities: dict[int, int] = field(default_factory=lambda: {0: 1})  # raw channels per modality
    max_tokens: int = 1024
    num_classes: int = 10
    out_channels: int = 1
    pos_embed: str = "learned"  # or "fourier"
    fourier_bands: int = 64
    grid_shape: tuple[int, ...] | None = None
    readout_heads: int = 1
    skips: bool = True
    weight_init: str = "fan_in"  # or "fixed": every matrix at std 0.02

    def __post_init__(self):
        self.blocks = [b if isinstance(b, BlockConfig) else BlockConfig(**b) for b in self.blocks]
        self.modalities = {int(k): int(v) for k, v in self.modalities.items()}
        if self.grid_shape is not None:
            self.grid_shape = tuple(self.grid_shape)
        if self.bottleneck_index is None:
            tokens = [b.out_tokens for b in self.blocks]
            self.bottleneck_index = int(np.argmin(tokens)) if tokens else 0

    @property
    def encoder(self) -> list[BlockConfig]:
        return self.blocks[: self.bottleneck_index + 1]

    @property
    def decoder(self) -> list[BlockConfig]:
        return self.blocks[self.bottleneck_index + 1:]

    def encoder_config(self) -> "ModelConfig":
        return replace(self, blocks=list(self.encoder), bottleneck_index=self.bottleneck_index)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = {str(k): v for k, v in self.modalities.items()}
        d["grid_shape"] = list(self.grid_shape) if self.grid_shape else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["blocks"] = [BlockConfig(**b) for b in d["blocks"]]
        return cls(**d)

    def validate(self) -> None:
        if not self.blocks:
            raise ConfigError("config has no blocks")
        if self.weight_init not in ("fan_in", "fixed"):
            raise ConfigError(f"weight_init must be 'fan_in' or 'fixed', got {self.weight_init!r}")
        b = self.bottleneck_index
        if not 0 <= b < len(self.blocks):
            raise ConfigError(f"bottleneck index {b} outside [0, {len(self.blocks)})")
        for i, blk in enumerate(self.blocks):
            try:
                blk.validate()
            except ConfigError as exc:
                raise ConfigError(f"block {i}: {exc}") from None
        groups = [blk.groups for blk in self.blocks]
        for i in range(1, len(groups)):
            if i <= b and groups[i] > groups[i - 1]:
                raise ConfigError(f"block {i}: groups increase ({groups[i - 1]} -> {groups[i]}) before the bottleneck")
            if i > b and groups[i] < groups[i - 1]:
                raise ConfigError(f"block {i}: groups decrease ({groups[i - 1]} -> {groups[i]}) after the bottleneck")
        for i in range(1, len(self.blocks)):
            prev = self.blocks[i - 1]
            if prev.out_tokens % self.blocks[i].groups:
                raise ConfigError(f"block {i}: {self.blocks[i].groups} groups do not divide the "
                                  f"{prev.out_tokens} tokens produced by block {i - 1}")
        if self.pos_embed not in ("learned", "fourier"):
            raise ConfigError(f"unknown positional embedding {self.pos_embed!r}")


# ---------------------------------------------------------------------------
# presets


def _table(groups, layers, heads, channels, latents) -> list[BlockConfig]:
    return [BlockConfig(g, k, c, h, l) for g, l, h, c, k in zip(groups, layers, heads, channels, latents)]


def _hip16_blocks():
    return _table([16, 4, 1, 1, 1, 4, 16], [2, 2, 18, 2, 1, 1, 1], [4, 8, 16, 32, 16, 8, 4],
                  [128, 256, 512, 1024, 512, 256, 128], [128, 256, 256, 64, 256, 256, 128])


def _hip256_blocks():
    return _table([256, 64, 16, 4, 1, 1, 1, 4, 16, 64, 256], [1, 1, 2, 2, 18, 2, 1, 1, 1, 1, 1],
                  [1, 2, 4, 8, 16, 32, 16, 8, 4, 2, 1], [64, 96, 128, 256, 512, 1024, 256, 128, 64, 32, 16],
                  [32, 64, 128, 256, 256, 64, 256, 256, 128, 64, 32])


def _hip16_toy_blocks():
    return _table([16, 4, 1, 1, 1, 4, 16], [1, 1, 2, 1, 1, 1, 1], [1, 2, 4, 8, 4, 2, 1],
                  [32, 64, 128, 256, 128, 64, 32], [16, 32, 64, 16, 64, 32, 16])


PRESETS = {
    "hip16": lambda: dict(blocks=_hip16_blocks(), input_channels=32, max_tokens=224 * 224,
                          modalities={0: 3}, num_classes=1000, out_channels=3, grid_shape=(224, 224)),
    "hip256": lambda: dict(blocks=_hip256_blocks(), input_channels=16, max_tokens=524288,
                           modalities={0: 3, 1: 1}, num_classes=527, out_channels=3),
    "hip16-toy": lambda: dict(blocks=_hip16_toy_blocks(), input_channels=32, max_tokens=64 * 64,
                              grid_shape=(64, 64)),
}


def flat_variant(config: ModelConfig) -> ModelConfig:
    """All-groups-1 twin with the same token count and width in every block."""
    blocks = [BlockConfig(1, b.groups * b.latents, b.channels, b.heads, b.self_attn_layers) for b in config.blocks]
    return replace(config, blocks=blocks, name=f"{config.name}-flat")


def preset(name: str, **overrides) -> ModelConfig:
    """Named configurations; ``<name>-flat`` gives the all-groups-1 twin."""
    flat = name.endswith("-flat")
    base = name[: -len("-flat")] if flat else name
    if base not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)} (optionally with -flat)")
    kw = PRESETS[base]()
    kw.update(overrides)
    cfg = ModelConfig(name=base, **kw)
    return flat_variant(cfg) if flat else cfg


def block_shapes(config: ModelConfig, tokens: int) -> list[tuple[int, int]]:
    """``(tokens, channels)`` produced by each block for ``tokens`` inputs."""
    shapes = []
    m = tokens
    for i, blk in enumerate(config.blocks):
        try:
            check_divisible(m, blk.groups)
        except ConfigError as exc:
            raise ConfigError(f"block {i}: {exc}") from None
        m = blk.out_tokens
        shapes.append((m, blk.channels))
    return shapes


def skip_sources(config: ModelConfig) -> dict:
    """Which encoder output is summed into each decoder input (key ``"readout"`` for the final read-out).

    The first decoder block reads the bottleneck directly and gets no skip.
    When several encoder outputs match, the mirror-position block wins.
    """
    b = config.bottleneck_index
    enc = {i: (blk.out_tokens, blk.channels) for i, blk in enumerate(config.blocks[:b])}
    last = len(config.blocks) - 1
    out = {}
    for j in list(range(b + 2, last + 1)) + ["readout"]:
        src = last if j == "readout" else j - 1
        if not config.skips:
            out[j] = None
            continue
        want = (config.blocks[src].out_tokens, config.blocks[src].channels)
        matches = [i for i, s in enc.items() if s == want]
        if not matches:
            if src > b:
                warnings.warn(f"decoder input after block {src} {want} has no shape-matched encoder "
                              f"output; skip disabled", stacklevel=3)
            out[j] = None
            continue
        mirror = 2 * b - src
        out[j] = min(matches, key=lambda i: (abs(i - mirror), i))
    if b + 1 <= last:
        out[b + 1] = None
    return out


# ---------------------------------------------------------------------------
# model


@dataclass
class EncodeTrace:
    outputs: list[Tensor]

    @property
    def bottleneck(self) -> Tensor:
        return self.outputs[-1]


@dataclass
class Model:
    config: ModelConfig
    params: ParamStore
    blocks: list[BlockParams]
    skips: dict
    projectors: ModalityProjector
    fourier: np.ndarray | None = None  # (max_tokens, F) for the Fourier regime

    @property
    def d_pos(self) -> int:
        return self.config.input_channels

    def num_params(self, part: str = "all") -> int:
        """``"classify"`` counts what a classifier uses: embeddings, encoder and class head."""
        if part == "all":
            return self.params.num_params()
        if part == "classify":
            enc = tuple(f"block{i}." for i in range(self.config.bottleneck_index + 1))
            return self.params.num_params(("pos.", "proj.", "head.") + enc)
        raise ValueError(part)

    # positions -------------------------------------------------------------

    def position_rows(self, positions: np.ndarray | None = None, tokens: int | None = None) -> Tensor:
        """Positional codes for ``positions`` (any int array) or the first ``tokens`` rows."""
        if positions is None:
            tokens = self.config.max_tokens if tokens is None else tokens
            if tokens > self.config.max_tokens:
                raise ValueError(f"{tokens} tokens exceed max_tokens={self.config.max_tokens}")
        if self.config.pos_embed == "learned":
            table = self.params["pos.table"]
            if positions is not None:
                return nx.take(table, positions, axis=0)
            return table if tokens == table.shape[0] else nx.getitem(table, slice(0, tokens))
        feats = self.fourier[positions] if positions is not None else self.fourier[:tokens]
        return nx.linear(nx.constant(feats), self.params["pos.fourier.w"])

    def embed(self, tokens: np.ndarray, segments=None) -> Tensor:
        """Project raw ``(B, M, C)`` tokens and add positional codes."""
        b, m, _ = tokens.shape
        if m > self.config.max_tokens:
            raise ValueError(f"{m} tokens exceed max_tokens={self.config.max_tokens}")
        segments = segments or [(min(self.config.modalities), 0, m)]
        content = project_content(tokens, segments, self.projectors)
        return nx.add(content, nx.broadcast_to(self.position_rows(tokens=m), (b, m, self.d_pos)))


FIXED_STD = 0.02
_TABLES = ("pos.", "proj.", "mask_token", "head.query")


def rescale_fan_in(store: ParamStore) -> None:
    """Rescale drawn projection matrices from std 0.02 to ``1/sqrt(fan_in)``.

    Positional tables, input projectors, latents and queries keep std 0.02, and
    zero-initialised output projections stay zero.  At toy widths a flat 0.02
    gives value and output projections a gain near 0.1 each, so the
    input-dependent part of every cross-attention shrinks about a hundredfold
    per block and nothing reaches the head.
    """
    for name, t in store.items():
        if t.data.ndim != 2 or not name.endswith((".w", ".w1", ".w2")) or name.startswith(_TABLES):
            continue
        if np.any(t.data):
            t.data = (t.data * (1.0 / (FIXED_STD * np.sqrt(t.shape[0])))).astype(t.data.dtype)


def build(config: ModelConfig, seed: int = 0) -> Model:
    """Allocate all parameters with a seed-deterministic normal init (biases zero).

    Every weight is first drawn at std 0.02; under ``weight_init="fan_in"``
    the attention and MLP matrices are then rescaled (see :func:`rescale_fan_in`).
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB1D]))
    store = ParamStore()
    d = config.input_channels
    fourier = None
    if config.pos_embed == "learned":
        store.add("pos.table", (config.max_tokens, d), rng)
    else:
        coords = (grid_coords(config.grid_shape) if config.grid_shape
                  else grid_coords((config.max_tokens,)))[: config.max_tokens]
        fourier = fourier_features(coords, config.fourier_bands).astype(np.float32)
        store.add("pos.fourier.w", (fourier.shape[1], d), rng)
    proj = {}
    for mod, cin in sorted(config.modalities.items()):
        w = store.add(f"proj.{mod}.w", (cin, d), rng)
        bias = store.add(f"proj.{mod}.b", (d,), init="zeros")
        proj[mod] = (w, bias)
    store.add("mask_token", (d,), rng)
    blocks, cin = [], d
    for i, blk in enumerate(config.blocks):
        blocks.append(init_block(store, f"block{i}", blk, cin, rng))
        cin = blk.channels
    db = config.blocks[config.bottleneck_index]
    # classification head: one learned query over the bottleneck
    store.add("head.query", (1, db.channels), rng)
    init_attention(store, "head.cross", db.channels, db.channels, rng)
    init_mlp(store, "head.cross_mlp", db.channels, 1, rng)
    init_layer_norm(store, "head.ln", db.channels)
    store.add("head.out.w", (db.channels, config.num_classes), rng)
    store.add("head.out.b", (config.num_classes,), init="zeros")
    # dense read-outs: hierarchical ("readout") and straight from the bottleneck ("bneck")
    for name, kv in (("readout", config.blocks[-1].channels), ("bneck", db.channels)):
        init_attention(store, f"{name}.cross", d, kv, rng)
        init_mlp(store, f"{name}.cross_mlp", d, 1, rng)
        init_layer_norm(store, f"{name}.ln", d)
        store.add(f"{name}.out.w", (d, config.out_channels), rng)
        store.add(f"{name}.out.b", (config.out_channels,), init="zeros")
    if config.weight_init == "fan_in":
        rescale_fan_in(store)
    return Model(config, store, blocks, skip_sources(config), ModalityProjector(proj), fourier)


# ---------------------------------------------------------------------------
# forward passes


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    return (nx.reshape(x, (1, *x.shape)), True) if x.ndim == 2 else (x, False)


def encode(model: Model, embedded: Tensor, training: bool = False, drop_rate: float = 0.0,
           rng: np.random.Generator | None = None) -> EncodeTrace:
    """Run the encoder blocks up to and including the bottleneck."""
    x, _ = _batched(embedded)
    outputs = []
    for i in range(model.config.bottleneck_index + 1):
        try:
            x = hip_block(x, model.blocks[i], training, drop_rate, rng)
        except ConfigError as exc:
            raise ConfigError(f"block {i}: {exc}") from None
        outputs.append(x)
    return EncodeTrace(outputs)


def _decoder_output(model: Model, trace: EncodeTrace, training: bool, drop_rate: float, rng) -> Tensor:
    x = trace.bottleneck
    for j in range(model.config.bottleneck_index + 1, len(model.blocks)):
        src = model.skips.get(j)
        if src is not None:
            x = nx.add(x, trace.outputs[src])
        x = hip_block(x, model.blocks[j], training, drop_rate, rng)
    src = model.skips.get("readout")
    if src is not None:
        x = nx.add(x, trace.outputs[src])
    return x


def _readout(model: Model, name: str, queries: Tensor, kv: Tensor) -> Tensor:
    st = model.params
    with nx.mac_scope(name), nx.mac_scope("cross"):
        z = mha(queries, kv, st, f"{name}.cross", model.config.readout_heads)
        z = nx.add(z, mlp(z, st, f"{name}.cross_mlp"))
    z = nx.layer_norm(z, st[f"{name}.ln.g"], st[f"{name}.ln.b"])
    return nx.linear(z, st[f"{name}.out.w"], st[f"{name}.out.b"])


def _group_layout(positions: np.ndarray, tokens: int, groups: int):
    """Padded ``(B, G, Qmax)`` gather indices placing each query with its group.

    Returns ``(gather, scatter, qmax)``: ``gather`` indexes the flattened
    queries with a trailing pad row, ``scatter`` maps each original query back
    to its slot in the flattened padded layout.
    """
    b, q = positions.shape
    size = tokens // groups
    gid = positions // size
    order = np.argsort(gid * tokens + positions, axis=1, kind="stable")
    gs = np.take_along_axis(gid, order, axis=1)
    counts = np.stack([np.bincount(r, minlength=groups) for r in gid])
    qmax = max(int(counts.max()), 1)
    starts = np.concatenate([np.zeros((b, 1), int), np.cumsum(counts, axis=1)[:, :-1]], axis=1)
    rank = np.arange(q)[None, :] - np.take_along_axis(starts, gs, axis=1)
    slot = (np.arange(b)[:, None] * groups + gs) * qmax + rank
    pad = b * q
    gather = np.full(b * groups * qmax, pad, dtype=np.intp)
    flat_src = (np.arange(b)[:, None] * q + order)
    gather[slot.ravel()] = flat_src.ravel()
    scatter = np.empty(b * q, dtype=np.intp)
    scatter[flat_src.ravel()] = slot.ravel()
    return gather, scatter, qmax


def grouped_cross_attention_readout(model: Model, name: str, queries: Tensor, kv: Tensor,
                                    groups: int, positions: np.ndarray | None, tokens: int | None) -> Tensor:
    b, q, d = queries.shape
    _, n, dkv = kv.shape
    if groups == 1:
        return _readout(model, name, queries, kv)
    kvg = nx.reshape(kv, (b, groups, n // groups, dkv))
    if positions is None:
        if q % groups:
            warnings.warn(f"{q} queries do not split into {groups} groups; using global read-out", stacklevel=3)
            return _readout(model, name, queries, kv)
        return nx.reshape(_readout(model, name, nx.reshape(queries, (b, groups, q // groups, d)), kvg),
                          (b, q, -1))
    positions = np.asarray(positions).reshape(b, q)
    if tokens is None or tokens % groups:
        warnings.warn(f"positions over {tokens} tokens cannot be assigned to {groups} groups; "
                      "using global read-out", stacklevel=3)
        return _readout(model, name, queries, kv)
    gather, scatter, qmax = _group_layout(positions, tokens, groups)
    flat = nx.concat([nx.reshape(queries, (b * q, d)), nx.constant(np.zeros((1, d)))], axis=0)
    qg = nx.reshape(nx.take(flat, gather, axis=0, unique=True), (b, groups, qmax, d))
    out = _readout(model, name, qg, kvg)
    c = out.shape[-1]
    back = nx.take(nx.reshape(out, (b * groups * qmax, c)), scatter, axis=0, unique=True)
    return nx.reshape(back, (b, q, c))


def decode_dense(model: Model, trace: EncodeTrace, queries: Tensor, positions: np.ndarray | None = None,
                 tokens: int | None = None, training: bool = False, drop_rate: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Hierarchical decode, then read out at ``queries`` (``(B, Q, d_pos)``).

    Each query attends only to the slice of the last decoder output that owns
    its source position (``positions`` in ``[0, tokens)``).  Without positions,
    queries are cut into consecutive equal slices; if that is impossible the
    read-out falls back to global attention with a warning.
    """
    queries, squeeze = _batched(queries)
    x = _decoder_output(model, trace, training, drop_rate, rng)
    last = model.config.blocks[-1] if model.config.decoder else model.config.blocks[model.config.bottleneck_index]
    out = grouped_cross_attention_readout(model, "readout", queries, x, last.groups, positions, tokens)
    return nx.reshape(out, out.shape[1:]) if squeeze else out


def decode_bottleneck_dense(model: Model, trace: EncodeTrace, queries: Tensor) -> Tensor:
    """Single cross-attention from ``queries`` onto the bottleneck tokens; decoder blocks unused."""
    queries, squeeze = _batched(queries)
    out = _readout(model, "bneck", queries, trace.bottleneck)
    return nx.reshape(out, out.shape[1:]) if squeeze else out


def classify(model: Model, trace: EncodeTrace) -> Tensor:
    """Logits ``(B, num_classes)`` from one learned query attending to the bottleneck."""
    st = model.params
    z = trace.bottleneck
    b, _, d = z.shape
    q = nx.broadcast_to(st["head.query"], (b, 1, d))
    heads = model.config.blocks[model.config.bottleneck_index].heads
    with nx.mac_scope("head"), nx.mac_scope("cross"):
        h = mha(q, z, st, "head.cross", heads)
        h = nx.add(h, mlp(h, st, "head.cross_mlp"))
    h = nx.layer_norm(h, st["head.ln.g"], st["head.ln.b"])
    logits = nx.linear(h, st["head.out.w"], st["head.out.b"])
    return nx.reshape(logits, (b, model.config.num_classes))


def load_params(model: Model, arrays: dict[str, np.ndarray]) -> list[str]:
    """Copy shape-compatible arrays into the model; returns the names left untouched."""
    skipped = []
    for name, t in model.params.items():
        a = arrays.get(name)
        if a is None or a.shape != t.shape:
            skipped.append(name)
            continue
        t.data = np.asarray(a, dtype=t.data.dtype).copy()
    return skipped
