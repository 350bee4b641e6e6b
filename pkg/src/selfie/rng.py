"""Splittable counter-based random streams.

Every stochastic site (dropout, masking, cropping, initialization, batch
sampling) draws from its own stream, derived from a root key by hashing a
human-readable label path. Streams are independent of each other and of the
order in which they are created, so adding or removing a consumer never
perturbs the draws of another site. A (seed, label-path) pair fully
determines every value drawn, which is what makes training trajectories,
checkpoint resumes, and tests bit-reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np

KEY_BYTES = 32


class RngStream:
    """A node in a tree of deterministic random streams.

    ``child(*labels)`` derives an independent sub-stream; ``generator()``
    yields a fresh numpy Generator (Philox, counter-based) keyed by this
    node. Calling ``generator()`` twice returns identical streams: state
    never leaks between call sites.
    """

    __slots__ = ("key", "path")

    def __init__(self, key: bytes, path: str = "root"):
        if len(key) != KEY_BYTES:
            raise ValueError(f"rng key must be {KEY_BYTES} bytes, got {len(key)}")
        self.key = key
        self.path = path

    @classmethod
    def from_seed(cls, seed: int) -> "RngStream":
        digest = hashlib.sha256(b"selfie-root:" + str(int(seed)).encode()).digest()
        return cls(digest, path=f"root[{seed}]")

    def child(self, *labels: str | int) -> "RngStream":
        if not labels:
            raise ValueError("child() needs at least one label")
        key, path = self.key, self.path
        # fold one label at a time so child(a, b) == child(a).child(b)
        for label in labels:
            key = hashlib.sha256(key + b"/" + str(label).encode()).digest()
            path = f"{path}/{label}"
        return RngStream(key, path=path)

    def generator(self) -> np.random.Generator:
        key = int.from_bytes(self.key[:16], "little")
        return np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"RngStream({self.path})"
