"""Seed-deterministic synthetic datasets and a reader for the CIFAR-10 binary format.

Every generator is a pure function of ``(spec, idx)``: the sample RNG is keyed
by ``SeedSequence([spec.seed, kind_tag, idx])``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .tokens import TokenArray, concat_modalities, fixed_shuffle, flatten, shuffle_permutation

KINDS = ("smooth-field", "local-pattern", "shapes-seg", "point-set", "bimodal")
_TAGS = {k: i + 1 for i, k in enumerate(KINDS)}

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_FILE = 10_000


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "smooth-field"
    grid: int = 64  # square side length for grid kinds
    num_classes: int = 4
    noise: float = 0.05
    seed: int = 0
    train_size: int = 4096
    val_size: int = 256
    components: tuple[int, int] = (3, 6)  # smooth-field sinusoid count range, inclusive
    max_cycles: float = 2.0  # smooth-field: highest spatial frequency, cycles per image
    points: int = 2048
    wave_len: int = 256

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; choose from {KINDS}")
        object.__setattr__(self, "components", tuple(self.components))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["components"] = list(self.components)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)

    def split_range(self, split: str) -> range:
        """Train and validation samples occupy disjoint index ranges."""
        if split == "train":
            return range(0, self.train_size)
        if split == "val":
            return range(self.train_size, self.train_size + self.val_size)
        raise ValueError(f"unknown split {split!r}")


def _rng(spec: DatasetSpec, idx: int, kind: str | None = None) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, _TAGS[kind or spec.kind], int(idx)]))


def _unit_grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row (v) and column (u) coordinates in [0, 1)."""
    c = np.arange(n) / n
    return np.meshgrid(c, c, indexing="ij")


# ---------------------------------------------------------------------------
# generators


def smooth_field_basis(spec: DatasetSpec, idx: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The sinusoid parameters behind sample ``idx``: ``(freqs (n, 2), phases (n,), amps (n,))``."""
    rng = _rng(spec, idx)
    lo, hi = spec.components
    n = int(rng.integers(lo, hi + 1))
    radius = spec.max_cycles * np.sqrt(rng.uniform(0.0, 1.0, n))
    angle = rng.uniform(0.0, 2 * np.pi, n)
    freqs = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    return freqs, rng.uniform(0.0, 2 * np.pi, n), rng.normal(0.0, 1.0, n)


def gen_smooth_field(spec: DatasetSpec, idx: int) -> np.ndarray:
    """Sum of low-frequency plane waves plus Gaussian noise, scaled to zero mean and unit variance."""
    freqs, phases, amps = smooth_field_basis(spec, idx)
    v, u = _unit_grid(spec.grid)
    img = np.zeros((spec.grid, spec.grid))
    for (fx, fy), ph, a in zip(freqs, phases, amps):
        img += a * np.cos(2 * np.pi * (fx * u + fy * v) + ph)
    noise_rng = _rng(spec, idx + (1 << 40))
    img += spec.noise * noise_rng.standard_normal(img.shape)
    img -= img.mean()
    sd = img.std()
    return img / sd if sd > 0 else img


def gen_local_pattern(spec: DatasetSpec, idx: int) -> tuple[np.ndarray, int]:
    """A small oriented grating at a random spot; the label is its orientation bucket.

    Class ``k`` has stripes at ``k * 180 / num_classes`` degrees, so four
    classes give 0, 45, 90 and 135.
    """
    rng = _rng(spec, idx)
    n = spec.grid
    label = int(rng.integers(spec.num_classes))
    theta = np.pi * label / spec.num_classes
    width = n / 4.0
    cy, cx = rng.uniform(n / 4.0, 3 * n / 4.0, 2)
    wavelength = rng.uniform(n / 4.0, 3 * n / 8.0)
    phase = rng.uniform(0, 2 * np.pi)
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    along = (x - cx) * np.cos(theta) + (y - cy) * np.sin(theta)
    envelope = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * width ** 2))
    img = envelope * np.cos(2 * np.pi * along / wavelength + phase)
    img += spec.noise * rng.standard_normal(img.shape)
    return img, label


SEG_CLASSES = ("background", "rect", "disk")
RECT_LEVEL, DISK_LEVEL = 1.0, -1.0


def shapes_seg_layout(spec: DatasetSpec, idx: int) -> list[tuple]:
    """Shapes in painting order: ``("rect", y0, x0, y1, x1)`` or ``("disk", cy, cx, r)``."""
    rng = _rng(spec, idx)
    n = spec.grid
    shapes = []
    for _ in range(int(rng.integers(1, 4))):
        if rng.random() < 0.5:
            h, w = rng.integers(n // 6, n // 2 + 1, 2)
            y0, x0 = rng.integers(0, n - h + 1), rng.integers(0, n - w + 1)
            shapes.append(("rect", int(y0), int(x0), int(y0 + h), int(x0 + w)))
        else:
            r = rng.uniform(n / 10, n / 4)
            cy, cx = rng.uniform(r, n - r, 2)
            shapes.append(("disk", float(cy), float(cx), float(r)))
    return shapes


def render_shapes(shapes, n: int) -> np.ndarray:
    """Per-pixel labels (0 background, 1 rect, 2 disk); later shapes cover earlier ones."""
    labels = np.zeros((n, n), dtype=np.int64)
    y, x = np.mgrid[0:n, 0:n] + 0.5
    for s in shapes:
        if s[0] == "rect":
            _, y0, x0, y1, x1 = s
            labels[y0:y1, x0:x1] = 1
        else:
            _, cy, cx, r = s
            labels[(y - cy) ** 2 + (x - cx) ** 2 <= r * r] = 2
    return labels


def gen_shapes_seg(spec: DatasetSpec, idx: int) -> tuple[np.ndarray, np.ndarray]:
    """Rectangles and disks on an empty background with their label map.

    Rectangles are bright and disks dark, so the labels are locally
    recoverable and the task measures how well spatial detail is decoded.
    """
    labels = render_shapes(shapes_seg_layout(spec, idx), spec.grid)
    img = np.choose(labels, [0.0, RECT_LEVEL, DISK_LEVEL])
    img = img + spec.noise * _rng(spec, idx + (1 << 40)).standard_normal(img.shape)
    return img, labels


SURFACES = ("sphere", "torus", "cylinder", "cube", "cone", "plane")


def _surface_points(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    a, b = rng.uniform(0, 2 * np.pi, n), rng.uniform(0, 1, n)
    if kind == "sphere":
        v = rng.standard_normal((n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "torus":
        phi = 2 * np.pi * b
        return np.stack([(1 + 0.35 * np.cos(phi)) * np.cos(a), (1 + 0.35 * np.cos(phi)) * np.sin(a),
                         0.35 * np.sin(phi)], axis=1)
    if kind == "cylinder":
        return np.stack([np.cos(a), np.sin(a), 2 * b - 1], axis=1)
    if kind == "cube":
        p = rng.uniform(-1, 1, (n, 3))
        axis = rng.integers(0, 3, n)
        p[np.arange(n), axis] = np.sign(rng.uniform(-1, 1, n))
        return p
    if kind == "cone":
        return np.stack([b * np.cos(a), b * np.sin(a), 1 - 2 * b], axis=1)
    return np.stack([2 * rng.uniform(0, 1, n) - 1, 2 * b - 1, np.zeros(n)], axis=1)


def gen_point_set(spec: DatasetSpec, idx: int) -> tuple[np.ndarray, int]:
    """``spec.points`` samples from one of ``num_classes`` surfaces, rotated, centered and randomly ordered."""
    if spec.num_classes > len(SURFACES):
        raise ValueError(f"point-set supports at most {len(SURFACES)} classes")
    rng = _rng(spec, idx)
    label = int(rng.integers(spec.num_classes))
    pts = _surface_points(SURFACES[label], spec.points, rng)
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    pts = pts @ (q * np.sign(np.diag(r)))
    pts = pts * rng.uniform(0.8, 1.2) + spec.noise * rng.standard_normal(pts.shape)
    pts -= pts.mean(axis=0)
    return pts[rng.permutation(len(pts))], label


def gen_bimodal(spec: DatasetSpec, idx: int) -> tuple[np.ndarray, np.ndarray, int]:
    """A grating image and a waveform, both driven by the same class.

    The class fixes the grating orientation and the waveform's dominant
    frequency, so either modality alone identifies it.
    """
    rng = _rng(spec, idx)
    label = int(rng.integers(spec.num_classes))
    n = spec.grid
    theta = np.pi * label / spec.num_classes
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    grid = np.cos(2 * np.pi * (x * np.cos(theta) + y * np.sin(theta)) / rng.uniform(4, 6) + rng.uniform(0, 2 * np.pi))
    t = np.arange(spec.wave_len) / spec.wave_len
    base = 4.0 * (label + 1)
    wave = np.sin(2 * np.pi * base * t + rng.uniform(0, 2 * np.pi))
    wave += 0.3 * np.sin(2 * np.pi * rng.uniform(1, 3) * t + rng.uniform(0, 2 * np.pi))
    grid += spec.noise * rng.standard_normal(grid.shape)
    wave += spec.noise * rng.standard_normal(wave.shape)
    return grid, wave, label


# ---------------------------------------------------------------------------
# token views


def sample_tokens(spec: DatasetSpec, idx: int) -> tuple[TokenArray, np.ndarray]:
    """``(tokens, target)`` for one sample; ``target`` is the label(s) or the field itself."""
    if spec.kind == "smooth-field":
        img = gen_smooth_field(spec, idx)
        return flatten(img[..., None]), img.reshape(-1, 1)
    if spec.kind == "local-pattern":
        img, label = gen_local_pattern(spec, idx)
        return flatten(img[..., None]), np.array(label)
    if spec.kind == "shapes-seg":
        img, labels = gen_shapes_seg(spec, idx)
        return flatten(img[..., None]), labels.reshape(-1)
    if spec.kind == "point-set":
        pts, label = gen_point_set(spec, idx)
        return flatten(pts), np.array(label)
    grid, wave, label = gen_bimodal(spec, idx)
    return concat_modalities([flatten(grid[..., None], 0), flatten(wave[:, None], 1)]), np.array(label)


@dataclass
class Dataset:
    """Memoized token views of one split, optionally under a fixed pixel shuffle."""

    spec: DatasetSpec
    split: str = "train"
    shuffle_seed: int | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def indices(self) -> range:
        return self.spec.split_range(self.split)

    def __len__(self) -> int:
        return len(self.indices)

    def item(self, i: int) -> tuple[TokenArray, np.ndarray]:
        """The ``i``-th sample of this split."""
        if i not in self._cache:
            tokens, target = sample_tokens(self.spec, self.indices[i])
            if self.shuffle_seed is not None:
                tokens = fixed_shuffle(tokens, self.shuffle_seed)
                if target.ndim >= 1 and target.shape[0] == tokens.num_tokens:
                    target = target[self._perm(tokens.num_tokens)]
            self._cache[i] = (tokens, target)
        return self._cache[i]

    def _perm(self, m: int) -> np.ndarray:
        return shuffle_permutation(m, self.shuffle_seed)[0]

    def batch(self, positions) -> tuple[np.ndarray, np.ndarray, list]:
        """Stack samples into ``(B, M, C)`` tokens and stacked targets; also returns the segments."""
        items = [self.item(int(i)) for i in positions]
        x = np.stack([t.tokens for t, _ in items]).astype(np.float32)
        y = np.stack([tg for _, tg in items])
        return x, y, list(items[0][0].modality_segments)

    def variance(self) -> float:
        """Pooled variance of all token values in the split."""
        x = np.stack([self.item(i)[0].tokens for i in range(len(self))])
        return float(x.var())


def cache_dataset(spec: DatasetSpec, path: str | Path, split: str = "train") -> Path:
    """Write a split into the checkpoint container as ``data/<idx>`` (plus ``target/<idx>``)."""
    records = {}
    for idx in spec.split_range(split):
        tokens, target = sample_tokens(spec, idx)
        records[f"data/{idx}"] = tokens.tokens
        records[f"target/{idx}"] = np.asarray(target, dtype=np.float32)
    return save_checkpoint(path, records, config={"dataset": spec.to_dict(), "split": split})


def load_cached_dataset(path: str | Path) -> tuple[DatasetSpec, dict[int, np.ndarray], dict[int, np.ndarray]]:
    records, _, meta = load_checkpoint(path)
    data = {int(k.split("/")[1]): v for k, v in records.items() if k.startswith("data/")}
    target = {int(k.split("/")[1]): v for k, v in records.items() if k.startswith("target/")}
    return DatasetSpec.from_dict(meta["dataset"]), data, target


# ---------------------------------------------------------------------------
# CIFAR-10 binary records


def load_cifar_binary(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read one batch file of ``<label byte><3072 pixel bytes>`` records.

    Returns ``(grids (N, 32, 32, 3) in [0, 1], labels (N,))``.  Pixels are
    stored channel-major per record and come back interleaved per pixel.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    expected = CIFAR_RECORD * CIFAR_RECORDS_PER_FILE
    if raw.size != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes "
                                 f"({CIFAR_RECORDS_PER_FILE} records of {CIFAR_RECORD}), got {raw.size}")
    rec = raw.reshape(CIFAR_RECORDS_PER_FILE, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetFormatError(f"{path}: record {bad} has label byte {labels[bad]} outside [0, 9]")
    grids = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return grids, labels


def gradient_histogram(img: np.ndarray, bins: int = 8) -> np.ndarray:
    """Magnitude-weighted histogram of doubled gradient angles from 3x3 Sobel filters."""
    a = np.pad(np.asarray(img, dtype=np.float64), 1, mode="edge")
    gx = (a[:-2, 2:] + 2 * a[1:-1, 2:] + a[2:, 2:]) - (a[:-2, :-2] + 2 * a[1:-1, :-2] + a[2:, :-2])
    gy = (a[2:, :-2] + 2 * a[2:, 1:-1] + a[2:, 2:]) - (a[:-2, :-2] + 2 * a[:-2, 1:-1] + a[:-2, 2:])
    mag = np.hypot(gx, gy)
    ang = np.mod(2 * np.arctan2(gy, gx), 2 * np.pi)
    hist = np.bincount(np.minimum((ang / (2 * np.pi) * bins).astype(int), bins - 1).ravel(),
                       weights=mag.ravel(), minlength=bins)
    total = hist.sum()
    return hist / total if total > 0 else hist
