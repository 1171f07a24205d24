"""Binary checkpoint blocks for trained stages.

Layout (little-endian): magic "DIARCK1\\0", u32 version, 32-byte maze-spec
SHA-256, u32 meta-JSON length + bytes, u32 stage count, then per stage a
name, a parameter count, and per parameter a name, dims, and raw float64
data.  Float64 arrays round-trip bitwise, so load(save(x)) == x exactly.
The maze hash ties every stage to the maze it was trained on; inference
refuses to assemble stages with mismatched hashes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

_MAGIC = b"DIARCK1\x00"
_VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_checkpoint(
    path,
    spec_hash: str,
    stages: dict[str, dict[str, np.ndarray]],
    meta: dict,
) -> None:
    parts = [_MAGIC, struct.pack("<I", _VERSION), bytes.fromhex(spec_hash)]
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_blob)))
    parts.append(meta_blob)
    parts.append(struct.pack("<I", len(stages)))
    for stage_name, params in stages.items():
        parts.append(_pack_name(stage_name))
        parts.append(struct.pack("<I", len(params)))
        for pname, arr in params.items():
            arr = np.asarray(arr, dtype=np.float64)
            parts.append(_pack_name(pname))
            parts.append(struct.pack("<B", arr.ndim))
            parts.append(struct.pack(f"<{max(arr.ndim, 1)}I", *(arr.shape or (1,))))
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def raw(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint at offset {self.off} (wanted {n} bytes)"
            )
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.raw(struct.calcsize("<" + fmt)))

    def name(self) -> str:
        (n,) = self.unpack("H")
        return self.raw(n).decode("utf-8")


def load_checkpoint(path) -> tuple[str, dict[str, dict[str, np.ndarray]], dict]:
    """Returns (spec hash hex, {stage: {param: array}}, meta)."""
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    magic = r.raw(len(_MAGIC))
    if magic != _MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    (version,) = r.unpack("I")
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    spec_hash = r.raw(32).hex()
    (meta_len,) = r.unpack("I")
    meta = json.loads(r.raw(meta_len).decode("utf-8"))
    (n_stages,) = r.unpack("I")
    stages: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(n_stages):
        stage_name = r.name()
        (n_params,) = r.unpack("I")
        params: dict[str, np.ndarray] = {}
        for _ in range(n_params):
            pname = r.name()
            (ndim,) = r.unpack("B")
            shape = r.unpack(f"{max(ndim, 1)}I")
            if ndim == 0:
                shape = ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(r.raw(8 * count), dtype="<f8").astype(np.float64)
            params[pname] = data.reshape(shape)
        stages[stage_name] = params
    if r.off != len(blob):
        raise CheckpointError(f"{len(blob) - r.off} trailing bytes")
    return spec_hash, stages, meta
