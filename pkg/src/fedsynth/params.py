"""Ordered named parameter collections (the unit of federation)."""

from __future__ import annotations

import hashlib
from collections.abc import Iterator, Mapping

import numpy as np


class FingerprintMismatch(ValueError):
    """Two parameter sets describe different architectures."""


def fingerprint_of(items: Mapping[str, np.ndarray] | list[tuple[str, tuple[int, ...]]]) -> bytes:
    """32-byte SHA-256 over declaration-ordered names and shapes."""
    h = hashlib.sha256()
    pairs = items.items() if isinstance(items, Mapping) else items
    for name, value in pairs:
        shape = value if isinstance(value, tuple) else tuple(np.shape(value))
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
        h.update(",".join(str(int(d)) for d in shape).encode("ascii"))
        h.update(b"\x01")
    return h.digest()


class ParamSet(Mapping[str, np.ndarray]):
    """Ordered mapping ``name -> array``.

    Iteration order is the declaration order. The arrays may be the live
    buffers of a model (see ``Model.params``); use :meth:`copy` for a
    detached snapshot.
    """

    def __init__(self, items: Mapping[str, np.ndarray] | list[tuple[str, np.ndarray]] | None = None):
        self._data: dict[str, np.ndarray] = {}
        if items is not None:
            pairs = items.items() if isinstance(items, Mapping) else items
            for name, value in pairs:
                if name in self._data:
                    raise ValueError(f"duplicate parameter name {name!r}")
                self._data[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._data.items())
        return f"ParamSet({shapes})"

    @property
    def fingerprint(self) -> bytes:
        return fingerprint_of(self._data)

    def copy(self) -> ParamSet:
        return ParamSet([(k, np.array(v, copy=True)) for k, v in self._data.items()])

    def astype(self, dtype) -> ParamSet:
        return ParamSet([(k, np.asarray(v, dtype=dtype).copy()) for k, v in self._data.items()])

    def check_compatible(self, other: ParamSet) -> None:
        if self.fingerprint != other.fingerprint:
            raise FingerprintMismatch(
                f"architecture fingerprints differ: {self.fingerprint.hex()[:16]} vs {other.fingerprint.hex()[:16]}"
            )

    def equal(self, other: ParamSet) -> bool:
        """Bitwise equality of names, shapes, dtypes and payloads."""
        if list(self) != list(other):
            return False
        for k in self:
            a, b = self[k], other[k]
            if a.shape != b.shape or a.dtype != b.dtype:
                return False
            if a.tobytes() != b.tobytes():
                return False
        return True

    def checksum(self) -> str:
        h = hashlib.sha256(self.fingerprint)
        for v in self._data.values():
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._data.values()]) if self._data else np.zeros(0)
