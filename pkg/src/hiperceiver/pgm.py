"""8-bit binary PGM images (the only image format the toolkit writes)."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi - lo < 1e-12:
        return np.full(img.shape, 128 if img.size and lo != 0 else 0, dtype=np.uint8) if img.dtype != np.uint8 else img
    return np.round((img - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path: str | Path, img: np.ndarray, rescale: bool = True) -> Path:
    """Write a 2-D array as P5. Float input is min-max scaled unless ``rescale=False``."""
    img = np.asarray(img)
    if img.ndim == 1:
        img = img[None, :]
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {img.shape}")
    data = to_uint8(img) if rescale else np.clip(img, 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(data).tobytes())
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
