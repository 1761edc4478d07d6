"""Masked auto-encoding: mask sampling, input corruption and the reconstruction loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .tokens import ConfigError


@dataclass(frozen=True)
class MaskSpec:
    rate: float = 0.85
    mode: str = "uniform"  # or "groupwise"
    seed: int = 0
    groups: int | None = None  # first-block group count, groupwise only

    def validate(self, tokens: int) -> None:
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"mask rate must lie in [0, 1), got {self.rate}")
        if self.mode not in ("uniform", "groupwise"):
            raise ValueError(f"unknown mask mode {self.mode!r}")
        if self.mode == "groupwise":
            if not self.groups or tokens % self.groups:
                raise ConfigError(f"groupwise masking needs a group count dividing {tokens}, got {self.groups}")


@dataclass
class MaskResult:
    masked: np.ndarray  # sorted token indices
    visible: np.ndarray  # sorted token indices
    tokens: int
    mode: str
    per_group_offsets: np.ndarray | None = None  # groupwise only

    @property
    def num_masked(self) -> int:
        return len(self.masked)


def masked_count(tokens: int, spec: MaskSpec) -> int:
    if spec.mode == "groupwise":
        return spec.groups * math.floor(spec.rate * (tokens // spec.groups))
    return math.floor(spec.rate * tokens)


def sample_mask(tokens: int, spec: MaskSpec, example_index: int = 0, step: int = 0) -> MaskResult:
    """Draw a mask without replacement from the stream keyed by ``(seed, example_index, step)``.

    Groupwise masks draw one set of within-group offsets and replicate it in
    every group.
    """
    spec.validate(tokens)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, example_index, step]))
    everything = np.arange(tokens)
    if spec.mode == "uniform":
        masked = np.sort(rng.choice(tokens, masked_count(tokens, spec), replace=False))
        offsets = None
    else:
        size = tokens // spec.groups
        offsets = np.sort(rng.choice(size, masked_count(tokens, spec) // spec.groups, replace=False))
        masked = (np.arange(spec.groups)[:, None] * size + offsets[None, :]).ravel()
    keep = np.ones(tokens, dtype=bool)
    keep[masked] = False
    return MaskResult(masked, everything[keep], tokens, spec.mode, offsets)


def _as_list(mask, batch: int) -> list[MaskResult]:
    masks = [mask] if isinstance(mask, MaskResult) else list(mask)
    if len(masks) == 1 and batch > 1:
        masks = masks * batch
    if len(masks) != batch:
        raise ValueError(f"{len(masks)} masks for a batch of {batch}")
    return masks


def corrupt(embedded: Tensor, mask: MaskResult | Sequence[MaskResult], mode: str | None = None,
            mask_token: Tensor | None = None, pos: Tensor | None = None) -> Tensor:
    """Hide masked rows of ``embedded`` (``(M, d)`` or ``(B, M, d)``).

    Uniform mode keeps every row but replaces masked ones with
    ``mask_token + pos[row]``; groupwise mode drops masked rows, leaving the
    same number of visible rows in every group.
    """
    squeeze = embedded.ndim == 2
    x = nx.reshape(embedded, (1, *embedded.shape)) if squeeze else embedded
    b, m, d = x.shape
    masks = _as_list(mask, b)
    mode = mode or masks[0].mode
    if any(mk.mode != mode or mk.tokens != m for mk in masks):
        raise ValueError(f"mask results do not match mode {mode!r} / {m} tokens")
    if all(mk.num_masked == 0 for mk in masks):
        return embedded
    if mode == "uniform":
        if mask_token is None or pos is None:
            raise ValueError("uniform masking needs the mask token and the positional rows")
        hidden = np.zeros((b, m, 1))
        for i, mk in enumerate(masks):
            hidden[i, mk.masked] = 1.0
        pos_b = pos if pos.ndim == 3 else nx.broadcast_to(pos, (b, m, d))
        fill = nx.add(nx.broadcast_to(mask_token, (b, m, d)), pos_b)
        out = nx.add(nx.mul_const(x, 1.0 - hidden), nx.mul_const(fill, hidden))
    elif mode == "groupwise":
        vis = np.stack([mk.visible for mk in masks])
        flat = (np.arange(b)[:, None] * m + vis).ravel()
        out = nx.reshape(nx.take(nx.reshape(x, (b * m, d)), flat, axis=0, unique=True), (b, vis.shape[1], d))
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    return nx.reshape(out, out.shape[1:]) if squeeze else out


def masked_targets(target_raw: np.ndarray, mask: MaskResult | Sequence[MaskResult]) -> np.ndarray:
    target_raw = np.asarray(target_raw)
    if target_raw.ndim == 2:
        return target_raw[mask.masked]
    masks = _as_list(mask, target_raw.shape[0])
    return np.stack([t[mk.masked] for t, mk in zip(target_raw, masks)])


def mae_loss(pred: Tensor, target_raw: np.ndarray, mask: MaskResult | Sequence[MaskResult]) -> Tensor:
    """Mean squared error over masked positions and raw channels.

    ``pred`` rows follow the sorted masked indices; ``target_raw`` holds all
    ``M`` positions.
    """
    target = masked_targets(target_raw, mask)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match masked targets {target.shape}")
    if pred.size == 0:
        return nx.constant(np.zeros(()))
    return nx.mean_sq(nx.add_const(pred, -target))


def mask_image(mask: MaskResult, grid_shape: tuple[int, int]) -> np.ndarray:
    """255 for visible pixels, 0 for masked ones, on the source grid."""
    img = np.full(mask.tokens, 255, dtype=np.uint8)
    img[mask.masked] = 0
    return img.reshape(grid_shape)


def row_autocorrelation(img: np.ndarray, lag: int) -> float:
    """Correlation between image rows ``lag`` apart (1.0 for an exactly periodic pattern)."""
    a = np.asarray(img, dtype=np.float64)
    x, y = a[:-lag].ravel(), a[lag:].ravel()
    x = x - x.mean()
    y = y - y.mean()
    den = math.sqrt(float((x * x).sum() * (y * y).sum()))
    return float((x * y).sum() / den) if den > 0 else 1.0
