"""Binary checkpoint container for named float32 arrays.

Layout (all integers little-endian):

    magic   8 bytes  b"REVSPIKE"
    version u32      (currently 1)
    digest  32 bytes sha256 of a caller-supplied config string (all zeros if none)
    count   u32      number of arrays
    per array:
        name_len u16, name utf-8, ndim u8, dims u32 * ndim,
        payload float32 little-endian, C order

Weights round-trip through the flat name -> array mapping produced by
``named_parameters``, so save -> load reproduces forward outputs bit for bit.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "MAGIC",
    "VERSION",
    "save_arrays",
    "load_arrays",
    "config_digest",
    "save_weights",
    "load_weights",
]

MAGIC = b"REVSPIKE"
VERSION = 1


def config_digest(config_text: str) -> bytes:
    return hashlib.sha256(config_text.encode()).digest()


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray],
                config_text: str | None = None) -> None:
    digest = config_digest(config_text) if config_text is not None else bytes(32)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(digest)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode()
            if len(raw) > 0xFFFF:
                raise ValueError(f"array name too long: {name[:32]}...")
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            if arr.ndim > 0xFF:
                raise ValueError(f"{name}: too many dimensions ({arr.ndim})")
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f4").tobytes())


def load_arrays(path: str | Path, expected_config: str | None = None) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint container (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        digest = fh.read(32)
        if expected_config is not None and digest != bytes(32):
            if digest != config_digest(expected_config):
                raise ValueError(f"{path}: checkpoint was written for a different configuration")
        (count,) = struct.unpack("<I", fh.read(4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            n = int(np.prod(dims)) if dims else 1
            payload = fh.read(4 * n)
            if len(payload) != 4 * n:
                raise ValueError(f"{path}: truncated payload for {name}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return out


def save_weights(path: str | Path, weights, config_text: str | None = None) -> None:
    """Save a model's parameters (as produced by ``named_parameters``)."""
    from .network import named_parameters

    save_arrays(path, dict(named_parameters(weights)), config_text)


def load_weights(path: str | Path, weights, expected_config: str | None = None) -> None:
    """Load parameters into an existing, identically-shaped model in place."""
    from .network import named_parameters

    params = dict(named_parameters(weights))
    stored = load_arrays(path, expected_config)
    if set(params) != set(stored):
        missing = set(params) - set(stored)
        extra = set(stored) - set(params)
        raise ValueError(f"parameter name mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, p in params.items():
        arr = stored[name]
        if arr.shape != p.shape:
            raise ValueError(f"{name}: stored shape {arr.shape} != model shape {p.shape}")
        p[...] = arr
