"""Class-conditioned DDPM: schedule, q-sampling, epsilon-prediction training, guided ancestral sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .rng import stream

NULL_CLASS = 2
DEFAULT_T = 200
DEFAULT_BETAS = (5e-4, 0.1)
SAMPLE_CHUNK = 64


class DiffusionDiverged(FloatingPointError):
    pass


# -------------------------------------------------------------------- schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Step ``t`` (1-based) lives at index ``t - 1`` of each array."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t.min()}..{t.max()}")
        return t


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETAS[0], beta_end: float = DEFAULT_BETAS[1]) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha))


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` is a scalar or one step per sample."""
    if eps.shape != x0.shape:
        raise nn.ShapeError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    t = schedule.check_t(t)
    ab = schedule.alpha_bar[t - 1]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


# -------------------------------------------------------------------- denoiser


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser(nn.Model):
    """Two-level U-Net predicting the noise; time and class embeddings are added as per-channel biases."""

    def __init__(self, rng: np.random.Generator, width: int = 16, emb_dim: int = 32):
        c, e = width, emb_dim
        self.emb_dim = emb_dim
        self.layers: dict[str, nn.Layer] = {
            "time": nn.Dense(e, e, rng),
            "cls": nn.Embedding(3, e, rng),
            "inc": nn.Conv2d(1, c, 3, rng, padding=1),
            "emb0": nn.Dense(e, c, rng),
            "down1": nn.Conv2d(c, 2 * c, 4, rng, stride=2, padding=1),
            "emb1": nn.Dense(e, 2 * c, rng),
            "down2": nn.Conv2d(2 * c, 2 * c, 4, rng, stride=2, padding=1),
            "emb2": nn.Dense(e, 2 * c, rng),
            "mid": nn.Conv2d(2 * c, 2 * c, 3, rng, padding=1),
            "up1": nn.ConvTranspose2d(2 * c, 2 * c, 4, rng, stride=2, padding=1),
            "merge1": nn.Conv2d(4 * c, 2 * c, 3, rng, padding=1),
            "up2": nn.ConvTranspose2d(2 * c, c, 4, rng, stride=2, padding=1),
            "merge2": nn.Conv2d(2 * c, c, 3, rng, padding=1),
            "outc": nn.Conv2d(c, 1, 3, rng, padding=1),
        }
        self.layers["cls"].params["weight"] *= 0.1
        self.relu = nn.ReLU()

    def named_layers(self):
        return list(self.layers.items())

    def forward(self, x: np.ndarray, t: np.ndarray, y: np.ndarray, keep: bool = False):
        L, relu = self.layers, self.relu
        t = np.asarray(t).reshape(-1)
        y = np.asarray(y).reshape(-1)
        if len(t) != len(x) or len(y) != len(x):
            raise nn.ShapeError(f"need one timestep and label per image: {len(x)}, {len(t)}, {len(y)}")
        c = {"x": x, "y": y}
        c["tf"] = timestep_features(t, self.emb_dim).astype(x.dtype)
        c["tpre"] = L["time"].forward(c["tf"])
        c["e"] = relu.forward(c["tpre"]) + L["cls"].forward(y)
        c["h0"] = L["inc"].forward(x) + L["emb0"].forward(c["e"])[:, :, None, None]
        a0 = relu.forward(c["h0"])
        c["a0"] = a0
        c["h1"] = L["down1"].forward(a0) + L["emb1"].forward(c["e"])[:, :, None, None]
        c["a1"] = relu.forward(c["h1"])
        c["h2"] = L["down2"].forward(c["a1"]) + L["emb2"].forward(c["e"])[:, :, None, None]
        c["a2"] = relu.forward(c["h2"])
        c["h3"] = L["mid"].forward(c["a2"])
        c["a3"] = relu.forward(c["h3"])
        c["cat1"] = np.concatenate([L["up1"].forward(c["a3"]), c["a1"]], axis=1)
        c["h4"] = L["merge1"].forward(c["cat1"])
        c["a4"] = relu.forward(c["h4"])
        c["cat2"] = np.concatenate([L["up2"].forward(c["a4"]), a0], axis=1)
        c["h5"] = L["merge2"].forward(c["cat2"])
        c["a5"] = relu.forward(c["h5"])
        out = L["outc"].forward(c["a5"])
        return (out, c) if keep else out

    __call__ = forward

    def backward(self, c: dict, grad: np.ndarray) -> dict[str, np.ndarray]:
        L, relu = self.layers, self.relu
        g: dict[str, np.ndarray] = {}

        def run(name, x, upstream):
            dx, pg = L[name].backward(x, upstream)
            g.update(self.qualify(name, pg))
            return dx

        def emb_bias(name, h_grad):
            return run(name, c["e"], h_grad.sum(axis=(2, 3)))

        d = run("outc", c["a5"], grad)
        d = run("merge2", c["cat2"], relu.backward(c["h5"], d)[0])
        n_up = d.shape[1] // 2
        d_a0 = d[:, n_up:]
        d = run("up2", c["a4"], np.ascontiguousarray(d[:, :n_up]))
        d = run("merge1", c["cat1"], relu.backward(c["h4"], d)[0])
        n_up = d.shape[1] // 2
        d_a1 = d[:, n_up:]
        d = run("up1", c["a3"], np.ascontiguousarray(d[:, :n_up]))
        d = run("mid", c["a2"], relu.backward(c["h3"], d)[0])
        dh2 = relu.backward(c["h2"], d)[0]
        d_e = emb_bias("emb2", dh2)
        d_a1 = d_a1 + run("down2", c["a1"], dh2)
        dh1 = relu.backward(c["h1"], d_a1)[0]
        d_e = d_e + emb_bias("emb1", dh1)
        d_a0 = d_a0 + run("down1", c["a0"], dh1)
        dh0 = relu.backward(c["h0"], d_a0)[0]
        d_e = d_e + emb_bias("emb0", dh0)
        run("inc", c["x"], dh0)
        run("cls", c["y"], d_e)
        run("time", c["tf"], relu.backward(c["tpre"], d_e)[0])
        return {k: g[k] for k in self.params()}


def build_denoiser(seed: int, width: int = 16) -> Denoiser:
    return Denoiser(stream(seed, "denoiser-init"), width=width)


# -------------------------------------------------------------------- training


@dataclass(frozen=True)
class GuidanceConfig:
    p_drop: float = 0.1
    w_g: float = 1.5
    sigma_mode: str = "beta"

    def __post_init__(self):
        if not 0 <= self.p_drop < 1:
            raise ValueError("p_drop must be in [0, 1)")
        if self.w_g < 0:
            raise ValueError("w_g must be >= 0")
        if self.sigma_mode != "beta":
            raise ValueError("only sigma_mode='beta' is supported")


@dataclass
class TrainDraw:
    t: np.ndarray
    eps: np.ndarray
    dropped: np.ndarray
    y: np.ndarray


def draw_training_noise(schedule: NoiseSchedule, y: np.ndarray, shape, p_drop: float, rng: np.random.Generator) -> TrainDraw:
    n = len(y)
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal((n,) + tuple(shape[1:])).astype(np.float32)
    dropped = rng.random(n) < p_drop
    return TrainDraw(t, eps, dropped, np.where(dropped, NULL_CLASS, y))


def to_model_range(images: np.ndarray) -> np.ndarray:
    return images * 2.0 - 1.0


def ddpm_train_step(
    denoiser,
    schedule: NoiseSchedule,
    batch: tuple[np.ndarray, np.ndarray],
    guidance: GuidanceConfig,
    rng: np.random.Generator,
    optimizer: nn.AdamW | None = None,
    return_draw: bool = False,
):
    """Mean squared epsilon error on one batch; with an optimizer, also one AdamW step.

    ``batch`` is (x0 in model range, labels in {0, 1}).
    """
    x0, y = batch
    y = np.asarray(y)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    draw = draw_training_noise(schedule, y, x0.shape, guidance.p_drop, rng)
    xt = q_sample(schedule, x0, draw.t, draw.eps.astype(x0.dtype))
    if optimizer is None:
        pred = denoiser(xt, draw.t, draw.y)
        loss, _ = nn.mse_loss(pred, draw.eps.astype(pred.dtype))
    else:
        pred, cache = denoiser.forward(xt, draw.t, draw.y, keep=True)
        loss, g = nn.mse_loss(pred, draw.eps.astype(pred.dtype))
        if not math.isfinite(loss):
            raise DiffusionDiverged("denoiser loss is non-finite")
        optimizer.step(denoiser.params(), denoiser.backward(cache, g))
    if not math.isfinite(loss):
        raise DiffusionDiverged("denoiser loss is non-finite")
    return (loss, draw) if return_draw else loss


@dataclass
class DdpmTrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-3
    lr_final: float = 1e-4
    seed: int = 0
    width: int = 8

    def __post_init__(self):
        if min(self.steps, self.batch_size, self.width) < 1 or self.lr <= 0 or self.lr_final <= 0:
            raise ValueError("steps, batch_size, width and learning rates must be positive")

    def lr_at(self, step: int) -> float:
        # cosine from lr down to lr_final
        frac = step / max(1, self.steps - 1)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1 + math.cos(math.pi * frac))


def train_ddpm(
    images: np.ndarray,
    labels: np.ndarray,
    config: DdpmTrainConfig,
    schedule: NoiseSchedule | None = None,
    guidance: GuidanceConfig | None = None,
) -> tuple[Denoiser, list[float]]:
    """Train one class-conditioned denoiser on (N, 1, H, W) images in [0, 1]."""
    schedule = schedule or make_schedule()
    guidance = guidance or GuidanceConfig()
    if len(images) == 0:
        raise ValueError("no images to train on")
    x = to_model_range(np.asarray(images, np.float32))
    labels = np.asarray(labels)
    model = build_denoiser(config.seed, config.width)
    opt = nn.AdamW(config.lr, weight_decay=0.0)
    rng = stream(config.seed, "ddpm-train")
    losses = []
    for step in range(config.steps):
        idx = rng.choice(len(x), size=min(config.batch_size, len(x)), replace=False)
        opt.lr = config.lr_at(step)
        losses.append(ddpm_train_step(model, schedule, (x[idx], labels[idx]), guidance, rng, opt))
    return model, losses


# -------------------------------------------------------------------- sampling


def guided_eps(denoiser, x_t: np.ndarray, t: int, y: np.ndarray, w_g: float) -> np.ndarray:
    n = len(x_t)
    ts = np.full(n, t)
    cond = denoiser(x_t, ts, np.asarray(y))
    if w_g == 0:
        return cond
    uncond = denoiser(x_t, ts, np.full(n, NULL_CLASS))
    # (1 + w) cond - w uncond, written so that equal branches give back cond exactly
    return cond + np.asarray(w_g, cond.dtype) * (cond - uncond)


def reverse_step(
    denoiser,
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    y: np.ndarray,
    guidance: GuidanceConfig,
    rng: np.random.Generator | list[np.random.Generator] | None,
) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1} with sigma_t^2 = beta_t and no noise at t = 1.

    ``rng`` may be a list with one generator per image.
    """
    schedule.check_t(t)
    eps_hat = guided_eps(denoiser, x_t, t, y, guidance.w_g)
    beta = schedule.beta[t - 1]
    ab = schedule.alpha_bar[t - 1]
    mean = (x_t - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(schedule.alpha[t - 1])
    if t == 1:
        return mean.astype(x_t.dtype)
    if isinstance(rng, list):
        xi = np.stack([g.standard_normal(x_t.shape[1:]) for g in rng])
    else:
        xi = rng.standard_normal(x_t.shape)
    return (mean + math.sqrt(beta) * xi).astype(x_t.dtype)


def ddpm_sample(
    denoiser,
    schedule: NoiseSchedule,
    count: int,
    class_label: int,
    guidance: GuidanceConfig,
    seed: int,
    shape: tuple[int, int, int] = (1, 32, 32),
) -> list[tuple[np.ndarray, int]]:
    """Full reverse chains; image ``i`` draws all its noise from its own derived stream."""
    out: list[tuple[np.ndarray, int]] = []
    for start in range(0, count, SAMPLE_CHUNK):
        ids = range(start, min(count, start + SAMPLE_CHUNK))
        gens = [stream(seed, "ddpm-sample", class_label, i) for i in ids]
        x = np.stack([g.standard_normal(shape) for g in gens]).astype(np.float32)
        y = np.full(len(gens), class_label)
        for t in range(schedule.T, 0, -1):
            x = reverse_step(denoiser, schedule, x, t, y, guidance, gens)
        imgs = np.clip((x + 1.0) * 0.5, 0.0, 1.0).astype(np.float32)
        out.extend((img[0], class_label) for img in imgs)
    return out
