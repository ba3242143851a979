"""Binary shard/checkpoint containers and flat ``key=value`` manifests.

All integers little-endian; every file ends with a CRC32 of the bytes before it.

Shard ("FSBU")::

    magic | version u16 | client_id u16 | count u32 | side u16
    | per image: split u8, label u8, side*side float32 | crc32

Checkpoint ("FSCK")::

    magic | version u16 | fingerprint 32B | round u32 | count u32 | tensors
    | optimizer count u32 | optimizer tensors | crc32

    tensor := name_len u16, utf-8 name, rank u8, extents u32[rank], float32 payload
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .params import FingerprintMismatch, ParamSet

SHARD_MAGIC = b"FSBU"
CKPT_MAGIC = b"FSCK"
FORMAT_VERSION = 1

SPLIT_CODES = {"train": 0, "val": 1, "test": 2, "none": 3}
SPLIT_NAMES = {v: k for k, v in SPLIT_CODES.items()}


class FormatError(ValueError):
    pass


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def write_atomic(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data, self.pos, self.end = data, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedFile(f"file ends at byte {self.end}, needed {self.pos + n}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def _check_header(data: bytes, magic: bytes) -> None:
    if len(data) < 6:
        if data[: len(magic)] != magic[: len(data)]:
            raise BadMagic(f"expected magic {magic!r}")
        raise TruncatedFile("file shorter than its header")
    if data[:4] != magic:
        raise BadMagic(f"expected magic {magic!r}, found {data[:4]!r}")
    (version,) = struct.unpack("<H", data[4:6])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"format version {version}, this build reads {FORMAT_VERSION}")


def _check_crc(data: bytes, body_end: int) -> None:
    if len(data) < body_end + 4:
        raise TruncatedFile("missing trailing CRC32")
    if len(data) != body_end + 4:
        raise ChecksumError(f"{len(data) - body_end - 4} unexpected trailing bytes")
    (stored,) = struct.unpack("<I", data[body_end:])
    if crc32(data[:body_end]) != stored:
        raise ChecksumError("CRC32 mismatch")


# ---------------------------------------------------------------------- shards


def encode_shard(client_id: int, images, labels, splits, side: int) -> bytes:
    parts = [SHARD_MAGIC, struct.pack("<HHIH", FORMAT_VERSION, client_id, len(images), side)]
    for img, label, split in zip(images, labels, splits):
        arr = np.asarray(img, dtype="<f4")
        if arr.shape != (side, side):
            raise ValueError(f"image shape {arr.shape} != ({side}, {side})")
        parts.append(struct.pack("<BB", SPLIT_CODES[split], int(label)))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", crc32(body))


def decode_shard(data: bytes) -> tuple[int, list[np.ndarray], list[int], list[str], int]:
    _check_header(data, SHARD_MAGIC)
    r = _Reader(data, max(len(data) - 4, 0))
    r.take(6)
    client_id, count, side = r.unpack("HIH")
    images, labels, splits = [], [], []
    for _ in range(count):
        tag, label = r.unpack("BB")
        if tag not in SPLIT_NAMES:
            _check_crc(data, len(data) - 4)
            raise FormatError(f"unknown split code {tag}")
        pixels = np.frombuffer(r.take(4 * side * side), dtype="<f4").reshape(side, side)
        images.append(pixels.astype(np.float32))
        labels.append(int(label))
        splits.append(SPLIT_NAMES[tag])
    _check_crc(data, r.pos)
    return client_id, images, labels, splits, side


# ----------------------------------------------------------------- checkpoints


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    a = np.asarray(arr)
    header = struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def _decode_tensor(r: _Reader) -> tuple[str, np.ndarray]:
    (n,) = r.unpack("H")
    name = r.take(n).decode("utf-8")
    (rank,) = r.unpack("B")
    shape = r.unpack(f"{rank}I") if rank else ()
    count = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    return name, arr


@dataclass
class Checkpoint:
    params: ParamSet
    round: int = 0
    optimizer: list[tuple[str, np.ndarray]] = field(default_factory=list)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<H", FORMAT_VERSION), ckpt.params.fingerprint]
    parts.append(struct.pack("<II", ckpt.round, len(ckpt.params)))
    parts.extend(_encode_tensor(k, v) for k, v in ckpt.params.items())
    parts.append(struct.pack("<I", len(ckpt.optimizer)))
    parts.extend(_encode_tensor(k, v) for k, v in ckpt.optimizer)
    body = b"".join(parts)
    return body + struct.pack("<I", crc32(body))


def decode_checkpoint(data: bytes, expected_fingerprint: bytes | None = None) -> Checkpoint:
    _check_header(data, CKPT_MAGIC)
    r = _Reader(data, max(len(data) - 4, 0))
    r.take(6)
    fingerprint = r.take(32)
    rnd, count = r.unpack("II")
    params = ParamSet([_decode_tensor(r) for _ in range(count)])
    (n_opt,) = r.unpack("I")
    optimizer = [_decode_tensor(r) for _ in range(n_opt)]
    _check_crc(data, r.pos)
    if params.fingerprint != fingerprint:
        raise ChecksumError("stored fingerprint does not match stored tensors")
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise FingerprintMismatch(f"checkpoint architecture {fingerprint.hex()[:16]} != expected {expected_fingerprint.hex()[:16]}")
    return Checkpoint(params=params, round=rnd, optimizer=optimizer)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    write_atomic(path, encode_checkpoint(ckpt))


def load_checkpoint(path, expected_fingerprint: bytes | None = None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), expected_fingerprint)


# ------------------------------------------------------------------- manifests


def format_manifest(items: dict[str, object]) -> str:
    return "".join(f"{k}={v}\n" for k, v in items.items())


def parse_manifest(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"manifest line without '=': {line!r}")
        out[key.strip()] = value.strip()
    return out
