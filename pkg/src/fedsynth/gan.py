"""Class-specific DCGAN pairs trained centrally on pooled train+val images."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .busgen import ClientShard
from .params import ParamSet
from .rng import stream

LATENT_DIM = 64
POOLED_ID = 0xFFFE
SAMPLE_CHUNK = 64


class LeakageError(ValueError):
    """A test-split image reached generator training."""


class GanDiverged(FloatingPointError):
    pass


@dataclass
class GanTrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    seed: int = 0
    label_smoothing: float = 0.1
    betas: tuple[float, float] = (0.5, 0.999)
    g_width: int = 16
    d_width: int = 8
    # std of gaussian noise added to every discriminator input while training
    instance_noise: float = 0.0

    def __post_init__(self):
        if min(self.epochs, self.batch_size) < 1 or min(self.lr_g, self.lr_d) <= 0:
            raise ValueError("epochs, batch_size and learning rates must be positive")
        if not 0 <= self.label_smoothing <= 0.2:
            raise ValueError("label_smoothing must be in [0, 0.2]")
        if min(self.g_width, self.d_width) < 1 or self.instance_noise < 0:
            raise ValueError("widths must be positive and instance_noise non-negative")


def build_generator(rng: np.random.Generator, base: int = 16) -> nn.Sequential:
    return nn.Sequential(
        [
            ("z", nn.Reshape(LATENT_DIM, 1, 1)),
            ("up0", nn.ConvTranspose2d(LATENT_DIM, 4 * base, 4, rng)),  # 4x4
            ("norm0", nn.ChannelNorm(4 * base)),
            ("act0", nn.ReLU()),
            ("up1", nn.ConvTranspose2d(4 * base, 2 * base, 4, rng, stride=2, padding=1)),  # 8x8
            ("norm1", nn.ChannelNorm(2 * base)),
            ("act1", nn.ReLU()),
            ("up2", nn.ConvTranspose2d(2 * base, base, 4, rng, stride=2, padding=1)),  # 16x16
            ("norm2", nn.ChannelNorm(base)),
            ("act2", nn.ReLU()),
            ("up3", nn.ConvTranspose2d(base, 1, 4, rng, stride=2, padding=1)),  # 32x32
            ("out", nn.Tanh()),
        ]
    )


def build_discriminator(rng: np.random.Generator, base: int = 16) -> nn.Sequential:
    return nn.Sequential(
        [
            ("down0", nn.Conv2d(1, base, 4, rng, stride=2, padding=1)),  # 16x16
            ("act0", nn.LeakyReLU(0.2)),
            ("down1", nn.Conv2d(base, 2 * base, 4, rng, stride=2, padding=1)),  # 8x8
            ("norm1", nn.ChannelNorm(2 * base)),
            ("act1", nn.LeakyReLU(0.2)),
            ("down2", nn.Conv2d(2 * base, 4 * base, 4, rng, stride=2, padding=1)),  # 4x4
            ("norm2", nn.ChannelNorm(4 * base)),
            ("act2", nn.LeakyReLU(0.2)),
            ("down3", nn.Conv2d(4 * base, 4 * base, 3, rng, padding=1)),
            ("act3", nn.LeakyReLU(0.2)),
            ("flat", nn.Flatten()),
            ("head", nn.Dense(4 * base * 16, 1, rng)),
            ("prob", nn.Sigmoid()),
        ]
    )


@dataclass
class GanPair:
    generator: nn.Sequential
    discriminator: nn.Sequential
    class_label: int
    latent_dim: int = LATENT_DIM
    opt_g: nn.AdamW | None = None
    opt_d: nn.AdamW | None = None

    @classmethod
    def create(cls, class_label: int, seed: int, config: GanTrainConfig | None = None) -> GanPair:
        config = config or GanTrainConfig(seed=seed)
        rng = stream(seed, "gan-init", class_label)
        return cls(
            build_generator(rng, config.g_width),
            build_discriminator(rng, config.d_width),
            class_label,
            opt_g=nn.AdamW(config.lr_g, betas=config.betas, weight_decay=0.0),
            opt_d=nn.AdamW(config.lr_d, betas=config.betas, weight_decay=0.0),
        )

    def generate(self, z: np.ndarray, keep: bool = False):
        """Images in [0, 1], shape (N, 1, 32, 32)."""
        t, inputs = self.generator.forward(z, keep=True)
        img = (t + 1) * 0.5
        return (img, inputs) if keep else img

    def params(self) -> ParamSet:
        return ParamSet(
            [(f"G.{k}", v) for k, v in self.generator.params().items()]
            + [(f"D.{k}", v) for k, v in self.discriminator.params().items()]
        )

    def load(self, params: ParamSet) -> None:
        self.generator.load(ParamSet([(k[2:], v) for k, v in params.items() if k.startswith("G.")]))
        self.discriminator.load(ParamSet([(k[2:], v) for k, v in params.items() if k.startswith("D.")]))


def discriminator_loss(p_real: np.ndarray, p_fake: np.ndarray, smoothing: float = 0.0):
    """``-[log D(x) + log(1 - D(G(z)))]`` with one-sided smoothing of the real target.

    Returns (value, grad wrt p_real, grad wrt p_fake, per-term values).
    """
    real_1, g1 = nn.bce_loss(p_real, np.ones_like(p_real, dtype=np.int64))
    if smoothing:
        real_0, g0 = nn.bce_loss(p_real, np.zeros_like(p_real, dtype=np.int64))
        real = (1 - smoothing) * real_1 + smoothing * real_0
        g_real = (1 - smoothing) * g1 + smoothing * g0
    else:
        real, g_real = real_1, g1
    fake, g_fake = nn.bce_loss(p_fake, np.zeros_like(p_fake, dtype=np.int64))
    return real + fake, g_real, g_fake, {"real": real, "fake": fake}


def generator_loss(p_fake: np.ndarray):
    """Non-saturating generator objective ``-log D(G(z))``."""
    return nn.bce_loss(p_fake, np.ones_like(p_fake, dtype=np.int64))


def _check(value: float, terms: dict[str, float], which: str) -> None:
    if not math.isfinite(value):
        bad = [k for k, v in terms.items() if not math.isfinite(v)]
        raise GanDiverged(f"{which} loss is non-finite (terms: {', '.join(bad) or 'total'})")


def d_grads(pair: GanPair, real: np.ndarray, z: np.ndarray, smoothing: float, noise=None):
    fake = pair.generate(z)
    if noise is not None:
        real, fake = real + noise[0], fake + noise[1]
    p_real, in_real = pair.discriminator.forward(real, keep=True)
    p_fake, in_fake = pair.discriminator.forward(fake, keep=True)
    value, g_real, g_fake, terms = discriminator_loss(p_real, p_fake, smoothing)
    _check(value, terms, "discriminator")
    _, gr = pair.discriminator.backward(in_real, g_real)
    _, gf = pair.discriminator.backward(in_fake, g_fake)
    return value, {k: gr[k] + gf[k] for k in gr}


def g_grads(pair: GanPair, z: np.ndarray, noise=None):
    img, in_g = pair.generate(z, keep=True)
    p_fake, in_d = pair.discriminator.forward(img if noise is None else img + noise, keep=True)
    value, g = generator_loss(p_fake)
    _check(value, {"fake": value}, "generator")
    g_img, _ = pair.discriminator.backward(in_d, g)
    _, grads = pair.generator.backward(in_g, 0.5 * g_img)
    return value, grads


def d_step(pair: GanPair, real_batch: np.ndarray, z_batch: np.ndarray, smoothing: float = 0.0, noise=None) -> float:
    """One AdamW step on the discriminator; the generator is not touched.

    ``noise`` optionally holds (real, fake) instance-noise arrays added to the D inputs.
    """
    value, grads = d_grads(pair, real_batch, z_batch, smoothing, noise)
    pair.opt_d.step(pair.discriminator.params(), grads)
    return value


def g_step(pair: GanPair, z_batch: np.ndarray, noise=None) -> float:
    """One AdamW step on the generator through a frozen discriminator."""
    value, grads = g_grads(pair, z_batch, noise)
    pair.opt_g.step(pair.generator.params(), grads)
    return value


def pooled_training_set(shards: list[ClientShard]) -> ClientShard:
    """Train+val images of all clients; test images are never read."""
    images, labels, splits = [], [], []
    for shard in shards:
        for i in shard.indices("train", "val"):
            images.append(shard.images[i])
            labels.append(shard.labels[i])
            splits.append(shard.splits[i])
    return ClientShard(POOLED_ID, images, labels, splits, shards[0].side if shards else 32)


def class_images(dataset: ClientShard, class_label: int) -> np.ndarray:
    """(N, 1, side, side) images of one class; refuses datasets holding test images."""
    if any(s == "test" for s in dataset.splits):
        raise LeakageError("generator training data contains test-split images")
    idx = [i for i, y in enumerate(dataset.labels) if y == class_label]
    if not idx:
        raise ValueError(f"no images of class {class_label} to train on")
    return np.stack([np.asarray(dataset.images[i], np.float32) for i in idx])[:, None]


@dataclass
class GanHistory:
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        return "epoch,d_loss,g_loss\n" + "".join(f"{e},{d:.6g},{g:.6g}\n" for e, d, g in self.rows)


def train_gan(class_label: int, dataset: ClientShard, config: GanTrainConfig) -> tuple[GanPair, GanHistory]:
    x = class_images(dataset, class_label)
    pair = GanPair.create(class_label, config.seed, config)
    history = GanHistory()
    for epoch in range(config.epochs):
        order = stream(config.seed, "gan-epoch", class_label, epoch).permutation(len(x))
        z_rng = stream(config.seed, "gan-z", class_label, epoch)
        d_losses, g_losses = [], []
        sigma = config.instance_noise
        for i in range(0, len(x), config.batch_size):
            real = x[order[i : i + config.batch_size]]
            z = z_rng.standard_normal((len(real), LATENT_DIM)).astype(np.float32)
            noise = (sigma * z_rng.standard_normal((2,) + real.shape)).astype(np.float32) if sigma else None
            d_losses.append(d_step(pair, real, z, config.label_smoothing, noise))
            z = z_rng.standard_normal((len(real), LATENT_DIM)).astype(np.float32)
            noise = (sigma * z_rng.standard_normal(real.shape)).astype(np.float32) if sigma else None
            g_losses.append(g_step(pair, z, noise))
        history.rows.append((epoch + 1, float(np.mean(d_losses)), float(np.mean(g_losses))))
    return pair, history


def gan_sample(pair: GanPair, count: int, seed: int) -> list[tuple[np.ndarray, int]]:
    if count == 0:
        return []
    z = stream(seed, "gan-sample", pair.class_label).standard_normal((count, pair.latent_dim)).astype(np.float32)
    out = []
    for i in range(0, count, SAMPLE_CHUNK):
        imgs = np.clip(pair.generate(z[i : i + SAMPLE_CHUNK]), 0.0, 1.0)
        out.extend((img[0], pair.class_label) for img in imgs)
    return out
