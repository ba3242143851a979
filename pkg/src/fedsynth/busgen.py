"""Procedural two-class ultrasound-like images, client shards and splits.

Benign lesions are smooth hypoechoic ellipses; malignant lesions have an
irregular, spiculated margin and are on average darker. Each simulated
client draws lesion and background parameters from its own ranges, so the
federation is non-IID in feature space as well as in size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates
from scipy.special import expit

from . import formats
from .rng import stream

SIDE = 32
BENIGN, MALIGNANT = 0, 1
CLASS_NAMES = {BENIGN: "benign", MALIGNANT: "malignant"}

# benign, malignant per client (BUS-BRA, BUSI, UDIAT)
TABLE_COUNTS = ((1268, 607), (437, 210), (109, 54))
CLIENT_NAMES = ("busbra_like", "busi_like", "udiat_like")
SPLIT_RATIO = (3, 1, 2)
MIN_CLASS_COUNT = 3


class DegenerateSplit(ValueError):
    pass


@dataclass(frozen=True)
class LesionSpec:
    class_label: int
    center: tuple[float, float]
    radii: tuple[float, float]
    irregularity: float
    spicule_count: int
    echo_intensity: float
    angle: float = 0.0
    background: float = 0.65
    looks: float = 10.0  # speckle: gamma shape, higher = cleaner

    def __post_init__(self):
        if self.class_label == BENIGN and (self.irregularity != 0 or self.spicule_count != 0):
            raise ValueError("benign lesions have zero irregularity and no spicules")
        if self.class_label == MALIGNANT and (self.irregularity < 0.25 or self.spicule_count < 4):
            raise ValueError("malignant lesions need irregularity >= 0.25 and >= 4 spicules")
        if self.class_label not in (BENIGN, MALIGNANT):
            raise ValueError(f"class_label must be 0 or 1, got {self.class_label}")


@dataclass(frozen=True)
class ClientProfile:
    background: tuple[float, float]
    radius: tuple[float, float]
    echo_shift: float
    looks: float


PROFILES = (
    ClientProfile(background=(0.60, 0.68), radius=(0.14, 0.28), echo_shift=0.0, looks=10.0),
    ClientProfile(background=(0.68, 0.76), radius=(0.12, 0.24), echo_shift=0.03, looks=7.0),
    ClientProfile(background=(0.52, 0.60), radius=(0.16, 0.30), echo_shift=-0.03, looks=14.0),
)


def sample_spec(class_label: int, profile: ClientProfile, rng: np.random.Generator) -> LesionSpec:
    center = tuple(float(v) for v in rng.uniform(0.35, 0.65, size=2))
    radii = tuple(float(v) for v in rng.uniform(*profile.radius, size=2))
    if class_label == BENIGN:
        irregularity, spicules = 0.0, 0
        echo = rng.uniform(0.20, 0.42)
    else:
        irregularity, spicules = float(rng.uniform(0.25, 0.5)), int(rng.integers(4, 10))
        echo = rng.uniform(0.36, 0.60)
    echo = float(np.clip(echo + profile.echo_shift, 0.2, 0.6))
    return LesionSpec(
        class_label=class_label,
        center=center,
        radii=radii,
        irregularity=irregularity,
        spicule_count=spicules,
        echo_intensity=echo,
        angle=float(rng.uniform(0, math.pi)),
        background=float(rng.uniform(*profile.background)),
        looks=profile.looks,
    )


def ellipse_radius(spec: LesionSpec, theta: np.ndarray) -> np.ndarray:
    """Radius (fraction of side) of the underlying ellipse along direction ``theta``."""
    a, b = spec.radii
    t = theta - spec.angle
    return a * b / np.sqrt((b * np.cos(t)) ** 2 + (a * np.sin(t)) ** 2)


def _margin_profile(spec: LesionSpec, rng: np.random.Generator, theta: np.ndarray) -> np.ndarray:
    """Relative radial modulation of the lesion margin; zero for benign."""
    if spec.irregularity == 0:
        return np.zeros_like(theta)
    phases = rng.uniform(0, 2 * math.pi, size=spec.spicule_count)
    heights = rng.uniform(0.6, 1.0, size=spec.spicule_count)
    grid = np.linspace(0, 2 * math.pi, 720, endpoint=False)

    def raw(t):
        spikes = sum(h * np.maximum(np.cos(t - p), 0.0) ** 8 for h, p in zip(heights, phases))
        return spikes + 0.3 * np.cos(3 * t + phases[0])

    ref = raw(grid)
    return spec.irregularity * (raw(theta) - ref.mean()) / ref.std()


def render_lesion(spec: LesionSpec, noise_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free image and soft lesion mask, both (SIDE, SIDE) float64."""
    rng = stream(noise_seed, "lesion")
    coords = (np.arange(SIDE) + 0.5) / SIDE
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dy, dx = yy - spec.center[0], xx - spec.center[1]
    rho = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    boundary = ellipse_radius(spec, theta) * np.maximum(1.0 + _margin_profile(spec, rng, theta), 0.3)
    mask = expit(-(rho - boundary) * SIDE / 0.35)

    texture = gaussian_filter(rng.normal(size=(SIDE, SIDE)), sigma=4.0, mode="wrap")
    texture *= 0.03 / max(texture.std(), 1e-12)
    depth = 0.04 * (0.5 - yy)  # mild depth attenuation
    background = spec.background + texture + depth
    clean = background - spec.echo_intensity * mask
    return clean, mask


def generate_image(spec: LesionSpec, noise_seed: int) -> np.ndarray:
    """32x32 float32 image in [0, 1]: rendered lesion times gamma speckle, clipped."""
    clean, _ = render_lesion(spec, noise_seed)
    speckle = stream(noise_seed, "speckle").gamma(spec.looks, 1.0 / spec.looks, size=clean.shape)
    return np.clip(clean * speckle, 0.0, 1.0).astype(np.float32)


def boundary_radii(mask: np.ndarray, center: tuple[float, float], angles: np.ndarray, step: float = 0.05) -> np.ndarray:
    """Distance (fraction of side) from ``center`` to the 0.5 level of ``mask`` along each angle."""
    side = mask.shape[0]
    cy, cx = center[0] * side - 0.5, center[1] * side - 0.5
    radii = np.empty(len(angles))
    steps = np.arange(0, side, step)
    for i, a in enumerate(angles):
        ys, xs = cy + steps * math.sin(a), cx + steps * math.cos(a)
        vals = map_coordinates(mask, [ys, xs], order=1, mode="constant", cval=0.0)
        j = int(np.argmax(vals < 0.5))
        if j == 0:
            radii[i] = 0.0
            continue
        v0, v1 = vals[j - 1], vals[j]
        frac = (v0 - 0.5) / (v0 - v1) if v0 != v1 else 0.0
        radii[i] = (steps[j - 1] + frac * step) / side
    return radii


# ---------------------------------------------------------------------- shards


@dataclass
class ClientShard:
    client_id: int
    images: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    splits: list = field(default_factory=list)
    side: int = SIDE

    def __post_init__(self):
        if not (len(self.images) == len(self.labels) == len(self.splits)):
            raise ValueError("images, labels and splits must have equal length")

    @property
    def n_k(self) -> int:
        return sum(1 for s in self.splits if s == "train")

    def indices(self, *split_tags: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s in split_tags]

    def arrays(self, *split_tags: str) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (N, 1, side, side) float32 images and int labels for the given splits."""
        idx = self.indices(*split_tags)
        if not idx:
            return np.zeros((0, 1, self.side, self.side), np.float32), np.zeros(0, np.int64)
        x = np.stack([np.asarray(self.images[i], np.float32) for i in idx])[:, None]
        y = np.array([self.labels[i] for i in idx], np.int64)
        return x, y

    def class_counts(self) -> tuple[int, int]:
        labels = np.asarray(self.labels, dtype=np.int64)
        return int((labels == BENIGN).sum()), int((labels == MALIGNANT).sum())

    def equal(self, other: ClientShard) -> bool:
        return (
            self.client_id == other.client_id
            and self.side == other.side
            and list(self.labels) == list(other.labels)
            and list(self.splits) == list(other.splits)
            and all(np.asarray(a, "<f4").tobytes() == np.asarray(b, "<f4").tobytes() for a, b in zip(self.images, other.images))
            and len(self.images) == len(other.images)
        )

    def to_bytes(self) -> bytes:
        return formats.encode_shard(self.client_id, self.images, self.labels, self.splits, self.side)

    @classmethod
    def from_bytes(cls, data: bytes) -> ClientShard:
        client_id, images, labels, splits, side = formats.decode_shard(data)
        return cls(client_id=client_id, images=images, labels=labels, splits=splits, side=side)


def save_shard(path, shard: ClientShard) -> int:
    """Write ``shard``; returns the file's trailing CRC32."""
    data = shard.to_bytes()
    formats.write_atomic(path, data)
    return int.from_bytes(data[-4:], "little")


def load_shard(path) -> ClientShard:
    return ClientShard.from_bytes(Path(path).read_bytes())


def split_counts(n: int) -> tuple[int, int, int]:
    """train/val/test sizes for one class: floor(n/2), floor(n/6), remainder.

    Small classes get at least one validation sample taken from the test share.
    """
    if n < MIN_CLASS_COUNT:
        raise DegenerateSplit(f"class count {n} < {MIN_CLASS_COUNT}")
    total = sum(SPLIT_RATIO)
    train = n * SPLIT_RATIO[0] // total
    val = max(n * SPLIT_RATIO[1] // total, 1)
    return train, val, n - train - val


def split_shard(shard: ClientShard, seed: int = 0) -> ClientShard:
    """Stratified 3:1:2 train/val/test tagging; image order is preserved."""
    splits = [""] * len(shard.labels)
    labels = np.asarray(shard.labels)
    for cls in (BENIGN, MALIGNANT):
        idx = np.flatnonzero(labels == cls)
        try:
            train, val, _ = split_counts(len(idx))
        except DegenerateSplit as exc:
            raise DegenerateSplit(f"client {shard.client_id}: {CLASS_NAMES[cls]} {exc}") from None
        order = stream(seed, "split", shard.client_id, cls).permutation(idx)
        for j, i in enumerate(order):
            splits[i] = "train" if j < train else "val" if j < train + val else "test"
    return ClientShard(shard.client_id, list(shard.images), list(shard.labels), splits, shard.side)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def federation_counts(scale_fraction: float) -> list[tuple[int, int]]:
    if not 0 < scale_fraction <= 1:
        raise ValueError(f"scale_fraction must be in (0, 1], got {scale_fraction}")
    counts = [(round_half_up(scale_fraction * b), round_half_up(scale_fraction * m)) for b, m in TABLE_COUNTS]
    for k, pair in enumerate(counts):
        for cls, n in enumerate(pair):
            if n < MIN_CLASS_COUNT:
                raise DegenerateSplit(
                    f"scale_fraction={scale_fraction} leaves client {k} ({CLIENT_NAMES[k]}) with {n} {CLASS_NAMES[cls]} images (< {MIN_CLASS_COUNT})"
                )
    return counts


def build_client(client_id: int, n_benign: int, n_malignant: int, seed: int, profile: ClientProfile | None = None) -> ClientShard:
    profile = profile or PROFILES[client_id]
    labels = [BENIGN] * n_benign + [MALIGNANT] * n_malignant
    order = stream(seed, "client-order", client_id).permutation(len(labels))
    labels = [labels[i] for i in order]
    spec_rng = stream(seed, "specs", client_id)
    images = []
    for i, cls in enumerate(labels):
        spec = sample_spec(cls, profile, spec_rng)
        images.append(generate_image(spec, (seed * 1_000_003 + client_id) * 100_003 + i))
    return ClientShard(client_id, images, labels, ["none"] * len(labels))


def build_federation(seed: int, scale_fraction: float) -> list[ClientShard]:
    counts = federation_counts(scale_fraction)
    return [split_shard(build_client(k, b, m, seed), seed) for k, (b, m) in enumerate(counts)]


@dataclass
class DatasetManifest:
    seed: int
    scale_fraction: float
    class_counts: list[tuple[int, int]]
    crcs: list[int]
    split_ratio: tuple[int, int, int] = SPLIT_RATIO
    format_version: int = formats.FORMAT_VERSION

    @property
    def content_checksum(self) -> int:
        return formats.crc32(b"".join(c.to_bytes(4, "little") for c in self.crcs))

    def to_text(self) -> str:
        items: dict[str, object] = {
            "format_version": self.format_version,
            "seed": self.seed,
            "scale_fraction": repr(self.scale_fraction),
            "split_ratio": ":".join(map(str, self.split_ratio)),
            "clients": len(self.class_counts),
        }
        for k, ((b, m), crc) in enumerate(zip(self.class_counts, self.crcs)):
            items[f"client{k}.benign"] = b
            items[f"client{k}.malignant"] = m
            items[f"client{k}.crc32"] = f"{crc:08x}"
        items["content_checksum"] = f"{self.content_checksum:08x}"
        return formats.format_manifest(items)

    @classmethod
    def from_text(cls, text: str) -> DatasetManifest:
        kv = formats.parse_manifest(text)
        n = int(kv["clients"])
        return cls(
            seed=int(kv["seed"]),
            scale_fraction=float(kv["scale_fraction"]),
            class_counts=[(int(kv[f"client{k}.benign"]), int(kv[f"client{k}.malignant"])) for k in range(n)],
            crcs=[int(kv[f"client{k}.crc32"], 16) for k in range(n)],
            split_ratio=tuple(int(v) for v in kv["split_ratio"].split(":")),
            format_version=int(kv["format_version"]),
        )


def shard_filename(client_id: int) -> str:
    return f"client{client_id}.fsbu"


def write_federation(out_dir, seed: int, scale_fraction: float) -> DatasetManifest:
    out_dir = Path(out_dir)
    shards = build_federation(seed, scale_fraction)
    out_dir.mkdir(parents=True, exist_ok=True)
    crcs = [save_shard(out_dir / shard_filename(s.client_id), s) for s in shards]
    manifest = DatasetManifest(seed, scale_fraction, [s.class_counts() for s in shards], crcs)
    formats.write_atomic(out_dir / "manifest.txt", manifest.to_text().encode("utf-8"))
    return manifest


def read_federation(data_dir) -> list[ClientShard]:
    data_dir = Path(data_dir)
    manifest = DatasetManifest.from_text((data_dir / "manifest.txt").read_text())
    return [load_shard(data_dir / shard_filename(k)) for k in range(len(manifest.class_counts))]
