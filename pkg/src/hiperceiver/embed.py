"""Per-modality input projection, positional codes and their analysis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .tokens import TokenArray

INIT_STD = 0.02


@dataclass
class PosEmbeddingTable:
    table: Tensor  # (M_max, d_pos), trainable
    d_pos: int

    @property
    def max_tokens(self) -> int:
        return self.table.shape[0]


@dataclass
class ModalityProjector:
    """One affine map per modality into the shared ``d_pos`` width.

    A modality with ``C_m`` raw channels reads the first ``C_m`` columns of
    the token matrix, so narrower modalities can be zero-padded when they
    share a :class:`TokenArray` with wider ones.
    """

    weights: dict[int, tuple[Tensor, Tensor]]

    @property
    def d_pos(self) -> int:
        return next(iter(self.weights.values()))[0].shape[1]

    def in_channels(self, modality: int) -> int:
        return self.weights[modality][0].shape[0]


def init_pos_table(max_tokens: int, d_pos: int, seed: int) -> PosEmbeddingTable:
    if max_tokens <= 0 or d_pos <= 0:
        raise ValueError(f"positional table needs positive dims, got ({max_tokens}, {d_pos})")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x905]))
    table = nx.parameter(rng.standard_normal((max_tokens, d_pos)) * INIT_STD, name="pos.table")
    return PosEmbeddingTable(table, d_pos)


def init_projectors(channels: dict[int, int], d_pos: int, seed: int) -> ModalityProjector:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E0]))
    weights = {}
    for mod in sorted(channels):
        w = nx.parameter(rng.standard_normal((channels[mod], d_pos)) * INIT_STD, name=f"proj.{mod}.w")
        b = nx.parameter(np.zeros(d_pos), name=f"proj.{mod}.b")
        weights[mod] = (w, b)
    return ModalityProjector(weights)


def pad_channels(x: TokenArray, channels: int) -> TokenArray:
    """Zero-pad the channel axis so modalities of different widths can be concatenated."""
    if x.channels > channels:
        raise ValueError(f"cannot pad {x.channels} channels down to {channels}")
    tokens = np.zeros((x.num_tokens, channels), dtype=x.tokens.dtype)
    tokens[:, :x.channels] = x.tokens
    return TokenArray(tokens, list(x.modality_segments), list(x.source_shapes))


def project_content(tokens: np.ndarray | Tensor, segments, projectors: ModalityProjector) -> Tensor:
    """Apply each segment's modality projector; ``tokens`` is ``(M, C)`` or ``(B, M, C)``."""
    x = tokens if isinstance(tokens, Tensor) else nx.constant(tokens)
    parts = []
    for mod, start, length in segments:
        if mod not in projectors.weights:
            raise KeyError(f"no projector for modality {mod}")
        w, b = projectors.weights[mod]
        cin = w.shape[0]
        if x.ndim == 2:
            seg = nx.getitem(x, (slice(start, start + length), slice(0, cin)))
        else:
            seg = nx.getitem(x, (slice(None), slice(start, start + length), slice(0, cin)))
        parts.append(nx.linear(seg, w, b))
    return parts[0] if len(parts) == 1 else nx.concat(parts, axis=-2)


def embed_inputs(x: TokenArray, projectors: ModalityProjector, pos: PosEmbeddingTable) -> Tensor:
    """``out[i] = project_{modality(i)}(x[i]) + pos[i]`` as an ``(M, d_pos)`` tensor."""
    m = x.num_tokens
    if m > pos.max_tokens:
        raise ValueError(f"{m} tokens exceed the positional table size {pos.max_tokens}")
    content = project_content(x.tokens, x.modality_segments, projectors)
    rows = pos.table if m == pos.max_tokens else nx.getitem(pos.table, slice(0, m))
    return nx.add(content, rows)


# ---------------------------------------------------------------------------
# Fourier-feature baseline


def grid_coords(shape: tuple[int, ...]) -> np.ndarray:
    """Row-major ``(prod(shape), len(shape))`` coordinates, each axis spanning [-1, 1]."""
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in mesh], axis=-1)


def fourier_features(coords: np.ndarray, bands: int, max_freq=None) -> np.ndarray:
    """Per axis ``[u, sin(f_k pi u)..., cos(f_k pi u)...]`` with ``f_k`` linear in [1, max_freq].

    ``max_freq`` defaults to the Nyquist frequency of each axis, i.e. half the
    number of distinct coordinates along it.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    if bands < 1:
        raise ValueError("need at least one frequency band")
    if not np.all(np.isfinite(coords)):
        raise ValueError("coordinates must be finite")
    dims = coords.shape[1]
    if max_freq is None:
        max_freq = [max(len(np.unique(coords[:, d])) / 2.0, 1.0) for d in range(dims)]
    max_freq = np.broadcast_to(np.asarray(max_freq, dtype=np.float64), (dims,))
    feats = []
    for d in range(dims):
        u = coords[:, d:d + 1]
        f = np.linspace(1.0, max_freq[d], bands)[None, :]
        feats += [u, np.sin(f * np.pi * u), np.cos(f * np.pi * u)]
    return np.concatenate(feats, axis=1)


# ---------------------------------------------------------------------------
# analysis of learned tables


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    return (a * b).sum(axis=1) / np.maximum(na * nb, 1e-12)


def adjacency_similarity(table: np.ndarray, grid_shape: tuple[int, int], num_random: int = 20000,
                         seed: int = 0) -> tuple[float, float]:
    """Mean cosine similarity of 4-adjacent grid positions vs. random position pairs."""
    h, w = grid_shape
    t = np.asarray(table, dtype=np.float64)[: h * w]
    idx = np.arange(h * w).reshape(h, w)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    adjacent = float(_cosine_rows(t[a], t[b]).mean())
    rng = np.random.default_rng(seed)
    i = rng.integers(0, h * w, num_random)
    j = (i + rng.integers(1, h * w, num_random)) % (h * w)
    return adjacent, float(_cosine_rows(t[i], t[j]).mean())


def pca(table: np.ndarray, n_components: int | None = None):
    """Principal axes of the table rows (descending variance) via the covariance eigendecomposition."""
    t = np.asarray(table, dtype=np.float64)
    centered = t - t.mean(axis=0)
    cov = centered.T @ centered / max(t.shape[0] - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    k = t.shape[1] if n_components is None else n_components
    return centered @ evecs[:, :k], np.maximum(evals[:k], 0.0), evecs[:, :k]


def pos_analysis(table: np.ndarray, grid_shape: tuple[int, ...] | None = None, probes=None,
                 n_components: int = 8) -> dict:
    """Inner-product maps for probe positions and the leading PCA channels.

    With a 2-D ``grid_shape`` the maps and PCA channels come back as images;
    otherwise they stay flat over raw indices.
    """
    t = np.asarray(table, dtype=np.float64)
    m = t.shape[0] if grid_shape is None else int(np.prod(grid_shape))
    t = t[:m]
    if probes is None:
        probes = np.linspace(0, m - 1, 4).astype(int)
    probes = np.asarray(probes, dtype=int)
    maps = t[probes] @ t.T
    proj, variance, axes = pca(t, min(n_components, t.shape[1]))
    channels = proj.T
    image = grid_shape is not None and len(grid_shape) == 2
    if image:
        maps = maps.reshape(len(probes), *grid_shape)
        channels = channels.reshape(channels.shape[0], *grid_shape)
    total = float(np.var(t, axis=0, ddof=1).sum()) if m > 1 else 0.0
    return {
        "probes": probes,
        "distance_maps": maps,
        "pca_channels": channels,
        "explained_variance": variance,
        "explained_ratio": variance / total if total > 0 else variance,
        "components": axes,
        "is_grid": image,
    }
