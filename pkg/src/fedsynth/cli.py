"""``fedsynth <datagen|train-gen|fed-train|eval|ablate> --config PATH [--key value]...``

Exit codes: 0 success, 1 internal error, 2 user or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import traceback
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import busgen, diffusion, formats, gan
from .classifier import build_classifier
from .config import ConfigError, RunConfig, resolve
from .fedsim import (
    ROUND_LOG_HEADER,
    FederationState,
    SyntheticPool,
    fmt,
    load_state,
    round_log_rows,
    run_federation,
    save_state,
)
from .metrics import evaluate_model
from .params import ParamSet
from .rng import derive_seed
from .sweep import ablation_sweep, cell_logs, client_test_metrics, series_files, sweep_csv

log = logging.getLogger("fedsynth")

COMMANDS = ("datagen", "train-gen", "fed-train", "eval", "ablate")
CLASS_NAMES = ("benign", "malignant")
EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2


class UserError(ValueError):
    pass


# ------------------------------------------------------------------ helpers


def _write_text(path: Path, text: str) -> None:
    formats.write_atomic(path, text.encode("utf-8"))


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_text(out_dir / "resolved.cfg", cfg.to_text())


def _load_shards(cfg: RunConfig) -> list[busgen.ClientShard]:
    try:
        return busgen.read_federation(cfg.data_dir)
    except FileNotFoundError as e:
        raise UserError(f"missing client shards in {cfg.data_dir} (run datagen first): {e.filename}") from e


def pool_paths(gen_dir, source: str) -> tuple[Path, Path]:
    gen_dir = Path(gen_dir)
    return gen_dir / f"{source}_pool.fsbu", gen_dir / f"{source}_pool.txt"


def load_pool(cfg: RunConfig, source: str, seed: int) -> SyntheticPool:
    path, _ = pool_paths(cfg.gen_dir, source)
    if not path.exists():
        raise UserError(f"no {source} synthetic pool at {path} (run train-gen with generator={source})")
    return SyntheticPool.from_shard(busgen.load_shard(path), source, seed)


# ------------------------------------------------------------------ datagen


def cmd_datagen(cfg: RunConfig) -> None:
    out = Path(cfg.data_dir)
    manifest = busgen.write_federation(out, cfg.seed, cfg.scale_fraction)
    _echo_config(cfg, out)
    log.info("wrote %d shards to %s (content crc %08x)", len(manifest.crcs), out, manifest.content_checksum)


# ------------------------------------------------------------------ generators


def _gan_training_sets(cfg: RunConfig, shards) -> list[tuple[str, busgen.ClientShard]]:
    if cfg.gan_per_client:
        return [(f"client{s.client_id}_", gan.pooled_training_set([s])) for s in shards]
    return [("", gan.pooled_training_set(shards))]


def _split_evenly(total: int, parts: int) -> list[int]:
    return [total // parts + (1 if i < total % parts else 0) for i in range(parts)]


def cmd_train_generator(cfg: RunConfig) -> None:
    shards = _load_shards(cfg)
    out = Path(cfg.gen_dir)
    _echo_config(cfg, out)
    kind = cfg.generator
    per_class = cfg.pool_count()
    samples: list[tuple[np.ndarray, int]] = []
    with threadpool_limits(limits=1):
        if kind == "dcgan":
            sets = _gan_training_sets(cfg, shards)
            for cls, name in enumerate(CLASS_NAMES):
                for (prefix, data), share in zip(sets, _split_evenly(per_class, len(sets))):
                    log.info("training %sdcgan for %s", prefix, name)
                    pair, history = gan.train_gan(cls, data, cfg.gan())
                    stem = f"dcgan_{prefix}{name}"
                    formats.save_checkpoint(out / f"{stem}.fsck", formats.Checkpoint(pair.params(), cfg.gan_epochs))
                    _write_text(out / f"{stem}_loss.csv", history.to_csv())
                    samples += gan.gan_sample(pair, share, derive_seed(cfg.gen_seed, "pool", prefix))
        else:
            pooled = gan.pooled_training_set(shards)
            x = np.stack(pooled.images)[:, None]
            log.info("training ddpm on %d images", len(x))
            model, losses = diffusion.train_ddpm(x, np.asarray(pooled.labels), cfg.ddpm(), cfg.schedule(), cfg.guidance())
            formats.save_checkpoint(out / "ddpm.fsck", formats.Checkpoint(model.params(), cfg.ddpm_steps))
            _write_text(out / "ddpm_loss.csv", "step,loss\n" + "".join(f"{i + 1},{fmt(v)}\n" for i, v in enumerate(losses)))
            for cls in (busgen.BENIGN, busgen.MALIGNANT):
                log.info("sampling %d ddpm images for class %d", per_class, cls)
                samples += diffusion.ddpm_sample(model, cfg.schedule(), per_class, cls, cfg.guidance(), cfg.gen_seed)
    images = [img for img, _ in samples]
    labels = [lbl for _, lbl in samples]
    shard = busgen.ClientShard(0xFFFF, images, labels, ["none"] * len(images))
    pool_path, manifest_path = pool_paths(out, kind)
    crc = busgen.save_shard(pool_path, shard)
    manifest = {
        "source": kind,
        "seed": cfg.gen_seed,
        "count": len(labels),
        "count_benign": labels.count(busgen.BENIGN),
        "count_malignant": labels.count(busgen.MALIGNANT),
        "per_client": int(cfg.gan_per_client and kind == "dcgan"),
        "crc": f"{crc:08x}",
    }
    _write_text(manifest_path, formats.format_manifest(manifest))


# ------------------------------------------------------------------ federation


def _avg_val_auc(params: ParamSet, shards) -> float | None:
    aucs = [evaluate_model(params, s, "val")[1] for s in shards]
    defined = [a for a in aucs if a is not None]
    return sum(defined) / len(defined) if defined else None


def cmd_fed_train(cfg: RunConfig) -> None:
    shards = _load_shards(cfg)
    fcfg = cfg.federation()
    pool = load_pool(cfg, cfg.synthetic_source, cfg.seed) if fcfg.synthetic_count else None
    out = Path(cfg.out_dir)
    log_path, state_path, best_path = out / "round_log.csv", out / "state.fsck", out / "best.fsck"
    fingerprint = build_classifier().params().fingerprint

    state: FederationState | None = None
    best = None
    log_text = ROUND_LOG_HEADER
    if cfg.resume:
        if not state_path.exists():
            raise UserError(f"resume requested but {state_path} does not exist")
        state = load_state(state_path, fcfg)
        best_ckpt = formats.load_checkpoint(best_path, fingerprint)
        with threadpool_limits(limits=1):
            best = (best_ckpt.params, best_ckpt.round, _avg_val_auc(best_ckpt.params, shards))
        kept = log_path.read_text().splitlines(keepends=True)
        log_text = "".join(kept[: 1 + len(shards) * state.round])
        log.info("resuming after round %d (best round %d)", state.round, best_ckpt.round)
    _echo_config(cfg, out)

    def on_round(st, record, best_now):
        nonlocal log_text
        log_text += round_log_rows(record)
        _write_text(log_path, log_text)
        save_state(state_path, st)
        if best_now[1] == record.round:
            formats.save_checkpoint(best_path, formats.Checkpoint(best_now[0], best_now[1]))
        log.info("round %d avg val auc %s", record.round, fmt(record.avg_val_auc))

    result = run_federation(fcfg, shards, pool, state=state, best=best, stop_after=cfg.stop_after or None, on_round=on_round)
    log.info("best round %d, avg val auc %s", result.best_round, fmt(result.best_avg_auc))


# ------------------------------------------------------------------ eval


def eval_csv(params: ParamSet, shards) -> str:
    for s in shards:
        if not s.indices("test"):
            raise UserError(f"client {s.client_id} has no test split")
    with threadpool_limits(limits=1):
        accs, aucs = client_test_metrics(params, shards)
    lines = ["client,acc,auc\n"]
    for s, acc, auc in zip(shards, accs, aucs):
        name = busgen.CLIENT_NAMES[s.client_id] if s.client_id < len(busgen.CLIENT_NAMES) else f"client{s.client_id}"
        lines.append(f"{name},{fmt(acc)},{fmt(auc)}\n")
    defined = [a for a in aucs if a is not None]
    lines.append(f"average,{fmt(sum(accs) / len(accs))},{fmt(sum(defined) / len(defined) if defined else None)}\n")
    return "".join(lines)


def cmd_eval(cfg: RunConfig) -> None:
    shards = _load_shards(cfg)
    path = Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out_dir) / "best.fsck"
    if not path.exists():
        raise UserError(f"checkpoint {path} does not exist")
    ckpt = formats.load_checkpoint(path, build_classifier().params().fingerprint)
    text = eval_csv(ckpt.params, shards)
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    _write_text(out / "eval.csv", text)


# ------------------------------------------------------------------ ablation


def cmd_ablate(cfg: RunConfig) -> None:
    counts = cfg.scaled_sweep_counts()
    shards = _load_shards(cfg)
    pools = {src: load_pool(cfg, src, cfg.seed) for src in cfg.sweep_sources}
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)

    def on_cell(cell):
        log.info("%s count=%d seed=%d mean test auc %s", cell.source, cell.count, cell.seed, fmt(cell.mean_auc))

    results = ablation_sweep(cfg.federation(), shards, pools, list(counts), list(cfg.sweep_seeds), on_cell)
    _write_text(out / "sweep.csv", sweep_csv(results))
    echo = f"# counts={','.join(map(str, counts))} seeds={','.join(map(str, cfg.sweep_seeds))}\n"
    for name, text in series_files(results).items():
        _write_text(out / name, echo + text)
    (out / "logs").mkdir(exist_ok=True)
    for name, text in cell_logs(results).items():
        _write_text(out / "logs" / name, text)


HANDLERS = {
    "datagen": cmd_datagen,
    "train-gen": cmd_train_generator,
    "fed-train": cmd_fed_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


# ------------------------------------------------------------------ entry point


def parse_args(argv: list[str]) -> tuple[str, str | None, dict[str, str]]:
    parser = argparse.ArgumentParser(
        prog="fedsynth",
        description="Federated classifier training with GAN or diffusion augmentation.",
        epilog="Any configuration key can be overridden as --key value (e.g. --rounds 30).",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None, help="flat key=value file")
    parser.add_argument("-q", "--quiet", action="store_true")
    args, rest = parser.parse_known_args(argv)
    overrides: dict[str, str] = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(rest):
                raise ConfigError(f"missing value for --{key}")
            value = rest[i + 1]
            i += 1
        overrides[key.replace("-", "_")] = value
        i += 1
    if args.quiet:
        logging.getLogger("fedsynth").setLevel(logging.WARNING)
    return args.command, args.config, overrides


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    argv = sys.argv[1:] if argv is None else argv
    try:
        if not argv or argv[0] not in (*COMMANDS, "-h", "--help"):
            raise ConfigError(f"first argument must be one of: {', '.join(COMMANDS)}")
        command, config_path, overrides = parse_args(argv)
        text = Path(config_path).read_text() if config_path else None
        cfg = resolve(text, overrides)
        HANDLERS[command](cfg)
    except (ValueError, OSError) as e:
        # ConfigError, UserError, DegenerateSplit, FormatError, FingerprintMismatch, missing files
        print(f"fedsynth: error: {e}", file=sys.stderr)
        return EXIT_USER
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USER
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
