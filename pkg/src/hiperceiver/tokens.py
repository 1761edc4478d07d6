"""Flattening raw signals into token matrices, and grouping them."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ConfigError(ValueError):
    """A configuration that cannot be realised (e.g. groups not dividing tokens)."""


@dataclass
class TokenArray:
    """``M x C`` token matrix plus the modality layout it was built from.

    ``modality_segments`` holds ``(modality_id, start, length)`` triples that
    tile ``[0, M)`` in order; ``source_shapes`` holds the index dimensions of
    each segment's original signal.
    """

    tokens: np.ndarray
    modality_segments: list[tuple[int, int, int]] = field(default_factory=list)
    source_shapes: list[tuple[int, ...]] = field(default_factory=list)

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be 2-D (M, C), got {self.tokens.shape}")
        if not self.modality_segments:
            self.modality_segments = [(0, 0, self.tokens.shape[0])]
            if not self.source_shapes:
                self.source_shapes = [(self.tokens.shape[0],)]
        pos = 0
        for _, start, length in self.modality_segments:
            if start != pos or length < 0:
                raise ValueError(f"segments must tile [0, M) contiguously: {self.modality_segments}")
            pos += length
        if pos != self.tokens.shape[0]:
            raise ValueError(f"segments cover {pos} tokens but M={self.tokens.shape[0]}")

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def channels(self) -> int:
        return self.tokens.shape[1]

    def modality_ids(self) -> np.ndarray:
        """Per-token modality id."""
        ids = np.empty(self.num_tokens, dtype=np.int64)
        for mod, start, length in self.modality_segments:
            ids[start:start + length] = mod
        return ids


@dataclass
class GroupedTokens:
    groups: np.ndarray  # (G, M/G, C)
    group_size: int
    offsets: np.ndarray  # start token of each group

    @property
    def num_groups(self) -> int:
        return self.groups.shape[0]


def flatten(signal: np.ndarray, modality_id: int = 0) -> TokenArray:
    """Row-major flatten of all index dimensions; the last axis is channels."""
    signal = np.asarray(signal)
    if signal.ndim < 2:
        raise ValueError("signal needs at least one index dimension plus a channel axis")
    if signal.size == 0:
        raise ValueError(f"empty signal of shape {signal.shape}")
    index_shape = signal.shape[:-1]
    m = int(np.prod(index_shape))
    return TokenArray(signal.reshape(m, signal.shape[-1]), [(modality_id, 0, m)], [tuple(index_shape)])


def concat_modalities(parts: Sequence[TokenArray]) -> TokenArray:
    """Stack token arrays back to back, recording where each one lives.

    Single-modality parts that all carry the same id are renumbered by their
    position in ``parts``.
    """
    if not parts:
        raise ValueError("no parts to concatenate")
    width = parts[0].channels
    for i, part in enumerate(parts):
        if part.channels != width:
            raise ValueError(f"channel mismatch: part 0 has C={width}, part {i} has C={part.channels}")
    ids = [seg[0] for p in parts for seg in p.modality_segments]
    renumber = len(parts) > 1 and len(set(ids)) < len(ids) and all(len(p.modality_segments) == 1 for p in parts)
    segments, shapes, start = [], [], 0
    for i, part in enumerate(parts):
        for (mod, _, length), shape in zip(part.modality_segments, part.source_shapes):
            segments.append((i if renumber else mod, start, length))
            shapes.append(shape)
            start += length
    return TokenArray(np.concatenate([p.tokens for p in parts], axis=0), segments, shapes)


def check_divisible(m: int, groups: int, what: str = "tokens") -> int:
    if groups <= 0 or m % groups:
        raise ConfigError(f"{groups} groups do not divide {m} {what}")
    return m // groups


def split_groups(x: TokenArray | np.ndarray, groups: int) -> GroupedTokens:
    """Cut the token sequence into ``groups`` contiguous equal slices."""
    tokens = x.tokens if isinstance(x, TokenArray) else np.asarray(x)
    size = check_divisible(tokens.shape[0], groups)
    return GroupedTokens(tokens.reshape(groups, size, tokens.shape[1]), size,
                         np.arange(groups) * size)


def merge_groups(y: np.ndarray | Sequence[np.ndarray], groups: int | None = None) -> TokenArray:
    """Concatenate per-group ``K x D`` outputs into a ``(G*K) x D`` array."""
    if isinstance(y, np.ndarray) and y.ndim == 3:
        parts = list(y)
    else:
        parts = [np.asarray(p) for p in y]
    if groups is not None and len(parts) != groups:
        raise ValueError(f"expected {groups} groups, got {len(parts)}")
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise ValueError(f"ragged groups: {sorted(shapes)}")
    return TokenArray(np.concatenate(parts, axis=0))


def shuffle_permutation(m: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded permutation of ``m`` token positions and its inverse."""
    perm = np.random.default_rng(np.random.SeedSequence([seed, m])).permutation(m)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(m)
    return perm, inv


def fixed_shuffle(x: TokenArray, seed: int) -> TokenArray:
    """Apply the same seeded token permutation regardless of content.

    Output token ``i`` is input token ``perm[i]``; modality metadata is kept as a
    single segment because the permutation mixes modalities.
    """
    perm, _ = shuffle_permutation(x.num_tokens, seed)
    if len(x.modality_segments) == 1:
        return TokenArray(x.tokens[perm], list(x.modality_segments), list(x.source_shapes))
    return TokenArray(x.tokens[perm], [(0, 0, x.num_tokens)], [(x.num_tokens,)])
