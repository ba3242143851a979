"""Flat ``key=value`` run configuration shared by every subcommand."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .diffusion import DdpmTrainConfig, GuidanceConfig, make_schedule
from .fedsim import FederationConfig
from .formats import format_manifest, parse_manifest
from .gan import GanTrainConfig

SOURCES = ("none", "dcgan", "ddpm")


class ConfigError(ValueError):
    """Bad key or value; reported as a user error."""


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    # paths
    data_dir: str = "runs/data"
    gen_dir: str = "runs/gen"
    out_dir: str = "runs/out"
    checkpoint: str = ""
    # data
    seed: int = 0
    scale_fraction: float = 1.0
    # federation
    algorithm: str = "fedavg"
    mu: float = 0.03
    rounds: int = 100
    local_epochs: int = 1
    batch_size: int = 32
    lr_real: float = 1e-3
    lr_synthetic: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_period: int = 30
    weight_decay: float = 0.01
    synthetic_source: str = "none"
    synthetic_count: int = 160
    synthetic_injection: str = "server"
    stop_after: int = 0
    resume: bool = False
    # generators
    generator: str = "ddpm"
    gen_seed: int = 0
    synthetic_per_class: int = 1000
    gan_epochs: int = 200
    gan_batch_size: int = 32
    gan_lr_g: float = 2e-4
    gan_lr_d: float = 2e-4
    gan_label_smoothing: float = 0.1
    gan_instance_noise: float = 0.0
    gan_d_width: int = 8
    gan_per_client: bool = False
    ddpm_steps: int = 2000
    ddpm_batch_size: int = 32
    ddpm_lr: float = 2e-3
    ddpm_width: int = 8
    ddpm_T: int = 200
    ddpm_beta_start: float = 5e-4
    ddpm_beta_end: float = 0.1
    p_drop: float = 0.1
    w_g: float = 1.5
    # ablation
    sweep_counts: tuple[int, ...] = field(default=(0, 160, 2000))
    sweep_sources: tuple[str, ...] = field(default=("ddpm",))
    sweep_seeds: tuple[int, ...] = field(default=(0, 1, 2, 3, 4))
    sweep_scale_counts: bool = True

    def __post_init__(self):
        if self.synthetic_source not in SOURCES:
            raise ConfigError(f"synthetic_source must be one of {SOURCES}")
        if self.generator not in SOURCES[1:]:
            raise ConfigError("generator must be dcgan or ddpm")
        if not 0 < self.scale_fraction <= 1:
            raise ConfigError("scale_fraction must be in (0, 1]")
        if self.synthetic_per_class < 0 or self.stop_after < 0:
            raise ConfigError("synthetic_per_class and stop_after must be >= 0")
        bad = [s for s in self.sweep_sources if s not in SOURCES[1:]]
        if bad:
            raise ConfigError(f"unknown sweep source(s): {', '.join(bad)}")
        counts = list(self.sweep_counts)
        if not counts or counts[0] != 0:
            raise ConfigError("sweep_counts must start with 0 (the no-augmentation baseline)")
        if any(b <= a for a, b in zip(counts, counts[1:])):
            raise ConfigError("sweep_counts must be strictly increasing")
        if not self.sweep_seeds:
            raise ConfigError("sweep_seeds must not be empty")
        # surface every sub-config's own validation now, before any output is written
        try:
            self.federation()
            self.gan()
            self.ddpm()
            self.guidance()
            self.schedule()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    # ------------------------------------------------------------ views

    def federation(self, **overrides) -> FederationConfig:
        count = self.synthetic_count if self.synthetic_source != "none" else 0
        kw = dict(
            algorithm=self.algorithm,
            mu=self.mu,
            rounds=self.rounds,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            lr_real=self.lr_real,
            lr_synthetic=self.lr_synthetic,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_period=self.lr_decay_period,
            weight_decay=self.weight_decay,
            synthetic_count=count,
            synthetic_injection=self.synthetic_injection,
            seed=self.seed,
        )
        kw.update(overrides)
        return FederationConfig(**kw)

    def gan(self) -> GanTrainConfig:
        return GanTrainConfig(
            epochs=self.gan_epochs,
            batch_size=self.gan_batch_size,
            lr_g=self.gan_lr_g,
            lr_d=self.gan_lr_d,
            seed=self.gen_seed,
            label_smoothing=self.gan_label_smoothing,
            d_width=self.gan_d_width,
            instance_noise=self.gan_instance_noise,
        )

    def ddpm(self) -> DdpmTrainConfig:
        return DdpmTrainConfig(
            steps=self.ddpm_steps, batch_size=self.ddpm_batch_size, lr=self.ddpm_lr, seed=self.gen_seed, width=self.ddpm_width
        )

    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(p_drop=self.p_drop, w_g=self.w_g)

    def schedule(self):
        return make_schedule(self.ddpm_T, self.ddpm_beta_start, self.ddpm_beta_end)

    def pool_count(self) -> int:
        """Synthetic images generated per class, scaled like the real data."""
        return int(round(self.synthetic_per_class * self.scale_fraction))

    def scaled_sweep_counts(self) -> tuple[int, ...]:
        if not self.sweep_scale_counts:
            return self.sweep_counts
        scaled = tuple(int(round(c * self.scale_fraction)) for c in self.sweep_counts)
        if any(b <= a for a, b in zip(scaled, scaled[1:])):
            raise ConfigError(f"sweep_counts collapse after scaling by {self.scale_fraction}: {scaled}")
        return scaled

    # ------------------------------------------------------------ text form

    def to_text(self) -> str:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = int(v)
            out[f.name] = v
        return format_manifest(out)


def _convert(name: str, raw: str):
    # annotations are strings under postponed evaluation
    typ = {f.name: f.type for f in fields(RunConfig)}[name]
    parse = {"int": int, "float": float, "str": str, "bool": _bool, "tuple[int, ...]": _int_list, "tuple[str, ...]": _str_list}[typ]
    try:
        return parse(raw.strip())
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {raw!r} ({e})") from e


def resolve(file_text: str | None, overrides: dict[str, str]) -> RunConfig:
    """File values first, then overrides; any unknown key is an error."""
    known = {f.name for f in fields(RunConfig)}
    values: dict[str, str] = {}
    if file_text is not None:
        try:
            values.update(parse_manifest(file_text))
        except ValueError as e:
            raise ConfigError(str(e)) from e
    values.update(overrides)
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return RunConfig(**{k: _convert(k, v) for k, v in values.items()})


def with_values(cfg: RunConfig, **kw) -> RunConfig:
    return dataclasses.replace(cfg, **kw)
