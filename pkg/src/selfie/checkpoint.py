"""SLFE checkpoint files: bit-exact save/load of parameters, optimizer
velocities, running statistics, RNG root key, and config digest.

Layout (all integers little-endian):
  magic "SLFE" | version u32 | step u64
  | rng-key length u32 + bytes | digest length u32 + UTF-8
  | entry count u32
  | per entry: name length u32 + UTF-8, role length u32 + UTF-8,
    flags u8 (bit0 trainable, bit1 decay), ndim u32, dims u32 each,
    byte-offset u64
  | payload length u64 | float32 payloads at the stated offsets.

Velocity buffers are stored as entries named "vel/<parameter>". Writes go to
"<path>.partial" and are renamed into place, so a crash never leaves a
truncated file at the final path.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError
from .params import ParamStore

MAGIC = b"SLFE"
VERSION = 1
VEL_PREFIX = "vel/"


@dataclass
class ManifestEntry:
    name: str
    role: str
    trainable: bool
    decay: bool
    shape: tuple[int, ...]
    offset: int


@dataclass
class CheckpointManifest:
    version: int
    step: int
    rng_key: bytes
    config_digest: str
    entries: list[ManifestEntry]
    arrays: dict[str, np.ndarray]

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {n: a for n, a in self.arrays.items() if not n.startswith(VEL_PREFIX)}

    def velocities(self) -> dict[str, np.ndarray]:
        return {n[len(VEL_PREFIX):]: a for n, a in self.arrays.items()
                if n.startswith(VEL_PREFIX)}

    def entry(self, name: str) -> ManifestEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise CheckpointError(f"checkpoint has no entry {name!r}")


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(path: str, store: ParamStore, step: int, rng_key: bytes,
                    config_digest: str,
                    velocity: dict[str, np.ndarray] | None = None) -> None:
    entries: list[tuple[str, str, int, np.ndarray]] = []
    for e in store.entries():
        flags = (1 if e.trainable else 0) | (2 if e.decay else 0)
        entries.append((e.name, e.role, flags, e.tensor.data))
    for name, vel in (velocity or {}).items():
        role = store.entry(name).role
        entries.append((VEL_PREFIX + name, role, 0, vel))

    header = bytearray()
    header += MAGIC
    header += struct.pack("<I", VERSION)
    header += struct.pack("<Q", step)
    header += struct.pack("<I", len(rng_key)) + rng_key
    header += _pack_str(config_digest)
    header += struct.pack("<I", len(entries))

    payload = bytearray()
    for name, role, flags, arr in entries:
        header += _pack_str(name)
        header += _pack_str(role)
        header += struct.pack("<BI", flags, arr.ndim)
        header += struct.pack(f"<{arr.ndim}I", *arr.shape)
        header += struct.pack("<Q", len(payload))
        payload += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    header += struct.pack("<Q", len(payload))

    partial = path + ".partial"
    with open(partial, "wb") as f:
        f.write(bytes(header))
        f.write(bytes(payload))
    os.replace(partial, path)


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint "
                                  f"(wanted {n} bytes at offset {self.pos})")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def take_str(self) -> str:
        return self.take(self.unpack("<I")).decode("utf-8")


def load_checkpoint(path: str, expect_digest: str | None = None) -> CheckpointManifest:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err

    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a SLFE checkpoint (bad magic)")
    version = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, "
                              f"this build reads version {VERSION}")
    step = r.unpack("<Q")
    rng_key = r.take(r.unpack("<I"))
    digest = r.take_str()
    if expect_digest is not None and digest != expect_digest:
        raise CheckpointError(f"{path}: config digest mismatch: checkpoint "
                              f"{digest[:12]}.., current config {expect_digest[:12]}..")

    entries = []
    for _ in range(r.unpack("<I")):
        name = r.take_str()
        role = r.take_str()
        flags, ndim = r.unpack("<BI")
        shape = tuple(struct.unpack(f"<{ndim}I", r.take(4 * ndim))) if ndim else ()
        offset = r.unpack("<Q")
        entries.append(ManifestEntry(name, role, bool(flags & 1), bool(flags & 2),
                                     shape, offset))
    payload_len = r.unpack("<Q")
    payload = r.take(payload_len)

    arrays = {}
    for e in entries:
        n = int(np.prod(e.shape, dtype=np.int64)) if e.shape else 1
        end = e.offset + 4 * n
        if end > payload_len:
            raise CheckpointError(f"{path}: truncated payload for entry {e.name!r}")
        arrays[e.name] = np.frombuffer(payload[e.offset:end],
                                       dtype="<f4").reshape(e.shape).copy()
    return CheckpointManifest(version, step, bytes(rng_key), digest, entries, arrays)


def restore_store(manifest: CheckpointManifest, store: ParamStore) -> None:
    """Copy every parameter array back into an identically-shaped store."""
    params = manifest.param_arrays()
    for e in store.entries():
        if e.name not in params:
            raise CheckpointError(f"checkpoint is missing parameter {e.name!r}")
        arr = params[e.name]
        if arr.shape != e.tensor.data.shape:
            raise CheckpointError(f"checkpoint shape {arr.shape} != model shape "
                                  f"{e.tensor.data.shape} for {e.name!r}")
        e.tensor.data[...] = arr
    extra = set(params) - set(store.names())
    if extra:
        raise CheckpointError(f"checkpoint has parameters unknown to the model: "
                              f"{sorted(extra)[:4]}")
