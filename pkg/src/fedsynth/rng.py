"""Named random sub-streams derived from a single root seed.

Every consumer of randomness asks for its own stream by name, so adding a
new consumer never shifts the draws seen by existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_hash(name: str) -> int:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(seed: int, *names: object) -> int:
    """``seed XOR hash(stream_name)``; the name path is joined with '/'."""
    name = "/".join(str(n) for n in names)
    return (int(seed) & _MASK64) ^ stream_hash(name)


def stream(seed: int, *names: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *names)))
