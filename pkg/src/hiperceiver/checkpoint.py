"""Versioned binary container for named float32 arrays.

Layout (all integers little-endian)::

    b"HIPCKPT1"
    u32 record_count, then records      # parameters
    u32 record_count, then records      # optimizer state
    record := u32 name_len, utf-8 name, u32 rank, u64 extent * rank, f32 data
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HIPCKPT1"
META_CONFIG = "meta/config_json"


class CheckpointError(ValueError):
    pass


def _write_records(f, records: dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f4")
        arr = np.ascontiguousarray(arr).reshape(arr.shape)
        raw = name.encode("utf-8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())


def _read_records(buf: memoryview, pos: int) -> tuple[dict[str, np.ndarray], int]:
    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {pos}, file has {len(buf)}")
        out = buf[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    records = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        n = int(np.prod(shape)) if rank else 1
        records[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    return records, pos


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray],
                    optimizer: dict[str, np.ndarray] | None = None, config: dict | None = None) -> Path:
    """Write parameters (plus optional optimizer state and a JSON config record)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = dict(params)
    if config is not None:
        records[META_CONFIG] = np.frombuffer(json.dumps(config, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        _write_records(f, records)
        _write_records(f, optimizer or {})
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict | None]:
    """Return ``(params, optimizer_state, config)``."""
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:8]) != MAGIC:
        raise CheckpointError(f"{path}: bad magic {bytes(buf[:8])!r}")
    params, pos = _read_records(buf, 8)
    optimizer, pos = _read_records(buf, pos)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    config = None
    if META_CONFIG in params:
        config = json.loads(params.pop(META_CONFIG).astype(np.uint8).tobytes().decode("utf-8"))
    return params, optimizer, config
