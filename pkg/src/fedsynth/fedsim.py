"""Federation engine: FedAvg/FedProx local training, weighted aggregation and
the server-side synthetic update, run round by round.

Round ``t`` (0-based internally, 1-based in records):

1. server mode: update the global model on drawn synthetic images;
2. every client starts from the same snapshot and trains one local epoch;
3. the server averages the client models with weights ``n_k / n``;
4. the new global model is scored on every client's validation split.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import formats, nn
from .busgen import ClientShard
from .classifier import build_classifier, classifier_with, loss_and_grads
from .metrics import evaluate_model
from .params import ParamSet
from .rng import stream

ALGORITHMS = ("fedavg", "fedprox")
INJECTION_MODES = ("server", "client")


class FederationError(ValueError):
    pass


@dataclass
class FederationConfig:
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
    synthetic_count: int = 160
    synthetic_injection: str = "server"
    seed: int = 0
    empty_epoch: bool = False  # test mode: clients take zero local steps

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise FederationError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.synthetic_injection not in INJECTION_MODES:
            raise FederationError(f"synthetic_injection must be one of {INJECTION_MODES}, got {self.synthetic_injection!r}")
        if self.mu < 0:
            raise FederationError("mu must be >= 0")
        if min(self.lr_real, self.lr_synthetic) <= 0:
            raise FederationError("learning rates must be > 0")
        if self.rounds < 1 or self.batch_size < 1 or self.local_epochs < 0 or self.lr_decay_period < 1:
            raise FederationError("rounds, batch_size, lr_decay_period must be >= 1 and local_epochs >= 0")
        if self.synthetic_count < 0:
            raise FederationError("synthetic_count must be >= 0")

    def lr(self, base: float, round_index: int) -> float:
        return base * self.lr_decay_factor ** (round_index // self.lr_decay_period)

    @property
    def proximal(self) -> bool:
        return self.algorithm == "fedprox" and self.mu > 0


@dataclass
class SyntheticPool:
    images: np.ndarray  # (N, side, side) float32 in [0, 1]
    labels: np.ndarray
    source: str = "ddpm"
    seed: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, np.float32)
        self.labels = np.asarray(self.labels, np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("pool images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def draw(self, round_index: int, count: int) -> np.ndarray:
        """Pool indices for one round.

        Draws walk through successive seeded permutations of the pool, so no
        image repeats until the pool is exhausted. Depends only on
        ``(seed, round_index, count)``.
        """
        n = len(self)
        positions = round_index * count + np.arange(count)
        out = np.empty(count, np.int64)
        for epoch in np.unique(positions // n):
            sel = positions // n == epoch
            out[sel] = stream(self.seed, "synthetic-pool", int(epoch)).permutation(n)[positions[sel] % n]
        return out

    def batches(self, round_index: int, count: int, batch_size: int) -> list[tuple[np.ndarray, np.ndarray]]:
        if count == 0:
            return []
        if len(self) == 0:
            raise FederationError(f"synthetic pool is empty but synthetic_count={count}")
        idx = self.draw(round_index, count)
        return [(self.images[idx[i : i + batch_size]][:, None], self.labels[idx[i : i + batch_size]]) for i in range(0, count, batch_size)]

    def to_shard(self) -> ClientShard:
        return ClientShard(client_id=0xFFFF, images=list(self.images), labels=[int(v) for v in self.labels], splits=["none"] * len(self), side=self.images.shape[-1] if len(self) else 32)

    @classmethod
    def from_shard(cls, shard: ClientShard, source: str, seed: int) -> SyntheticPool:
        if any(s != "none" for s in shard.splits):
            raise FederationError("synthetic pool images must not carry split tags")
        images = np.stack(shard.images) if shard.images else np.zeros((0, shard.side, shard.side), np.float32)
        return cls(images, np.asarray(shard.labels), source, seed)


@dataclass
class RoundRecord:
    round: int
    client_ids: list[int]
    train_loss: list[float]
    val_acc: list[float]
    val_auc: list[float | None]
    weights: list[float]

    @property
    def avg_val_auc(self) -> float | None:
        defined = [a for a in self.val_auc if a is not None]
        return sum(defined) / len(defined) if defined else None


@dataclass
class FederationState:
    params: ParamSet
    round: int = 0  # completed rounds
    server_opt: nn.AdamW | None = None


@dataclass
class FederationResult:
    best_params: ParamSet
    best_round: int
    best_avg_auc: float | None
    records: list[RoundRecord] = field(default_factory=list)
    state: FederationState | None = None


def local_objective(model, x, y, anchor: ParamSet | None, mu: float) -> tuple[float, dict[str, np.ndarray]]:
    """BCE on a batch plus, for FedProx, ``(mu/2) * ||w - w_global||^2``; value and gradients."""
    loss, grads = loss_and_grads(model, x, y)
    if anchor is not None:
        live = model.params()
        loss += proximal_value(live, anchor, mu)
        grads = {k: g + mu * (live[k] - anchor[k]) for k, g in grads.items()}
    return loss, grads


def proximal_value(params: ParamSet, anchor: ParamSet, mu: float) -> float:
    return 0.5 * mu * float(sum(np.sum((params[k].astype(np.float64) - anchor[k]) ** 2) for k in params))


def _train_step(model, opt, x, y, lr, anchor: ParamSet | None, mu: float) -> float:
    loss, grads = local_objective(model, x, y, anchor, mu)
    opt.step(model.params(), grads, lr=lr)
    return loss


def local_update(
    global_params: ParamSet,
    shard: ClientShard,
    config: FederationConfig,
    round_index: int = 0,
    synthetic_batches: list | None = None,
) -> tuple[ParamSet, float]:
    """One client's local training from the round's global snapshot.

    Returns the updated copy and the mean training loss over real batches.
    ``global_params`` is never written.
    """
    model = build_classifier()
    model.params().check_compatible(global_params)
    x, y = shard.arrays("train")
    if len(y) == 0:
        raise FederationError(f"client {shard.client_id} has no training images")
    model.load(global_params)
    anchor = global_params if config.proximal else None
    opt = nn.AdamW(config.lr_real, weight_decay=config.weight_decay)
    lr_real = config.lr(config.lr_real, round_index)
    lr_syn = config.lr(config.lr_synthetic, round_index)
    losses = []
    epochs = 0 if config.empty_epoch else config.local_epochs
    for epoch in range(epochs):
        for xs, ys in synthetic_batches or []:
            _train_step(model, opt, xs, ys, lr_syn, anchor, config.mu)
        order = stream(config.seed, "local", round_index, shard.client_id, epoch).permutation(len(y))
        for i in range(0, len(y), config.batch_size):
            b = order[i : i + config.batch_size]
            losses.append(_train_step(model, opt, x[b], y[b], lr_real, anchor, config.mu))
    return model.params().copy(), float(np.mean(losses)) if losses else 0.0


def synthetic_update(
    global_params: ParamSet,
    pool: SyntheticPool | None,
    config: FederationConfig,
    round_index: int,
    optimizer: nn.AdamW | None = None,
) -> tuple[ParamSet, int]:
    """Server-side update of the global model on this round's synthetic draw.

    Returns the new parameters and the number of optimizer steps taken.
    """
    if config.synthetic_count == 0:
        return global_params, 0
    if pool is None:
        raise FederationError(f"synthetic_count={config.synthetic_count} but no synthetic pool")
    batches = pool.batches(round_index, config.synthetic_count, config.batch_size)
    model = classifier_with(global_params)
    opt = optimizer if optimizer is not None else nn.AdamW(config.lr_synthetic, weight_decay=config.weight_decay)
    lr = config.lr(config.lr_synthetic, round_index)
    for xs, ys in batches:
        _train_step(model, opt, xs, ys, lr, None, 0.0)
    return model.params().copy(), len(batches)


def aggregate(locals_: list[tuple], return_weights: bool = False):
    """Sample-weighted average ``sum_k (n_k / n) w_k``.

    Entries are ``(params, n_k)`` or ``(params, n_k, client_id)``. Accumulation
    is float64 in a canonical order (client id, else content hash), so the
    result does not depend on the order of ``locals_``.
    """
    if not locals_:
        raise FederationError("nothing to aggregate")
    first = locals_[0][0]
    for entry in locals_:
        first.check_compatible(entry[0])
        if entry[1] <= 0:
            raise FederationError(f"client sample count must be > 0, got {entry[1]}")
    if all(len(e) > 2 for e in locals_):
        ordered = sorted(locals_, key=lambda e: e[2])
    else:
        ordered = sorted(locals_, key=lambda e: (e[1], e[0].checksum()))
    n = sum(e[1] for e in ordered)
    weights = [e[1] / n for e in ordered]
    out = []
    for name, ref in first.items():
        acc = np.zeros(ref.shape, np.float64)
        for w, entry in zip(weights, ordered):
            acc += w * entry[0][name].astype(np.float64)
        out.append((name, acc.astype(ref.dtype)))
    result = ParamSet(out)
    return (result, weights) if return_weights else result


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FEDSYNTH_THREADS", os.cpu_count() or 1)))
    except ValueError:
        return 1


def run_round(
    state: FederationState,
    config: FederationConfig,
    shards: list[ClientShard],
    pool: SyntheticPool | None = None,
) -> tuple[FederationState, RoundRecord]:
    t = state.round
    params = state.params
    server_opt = state.server_opt
    synthetic_batches = None
    if config.synthetic_count and config.synthetic_injection == "server":
        if server_opt is None:
            server_opt = nn.AdamW(config.lr_synthetic, weight_decay=config.weight_decay)
        params, _ = synthetic_update(params, pool, config, t, server_opt)
    elif config.synthetic_count:
        if pool is None:
            raise FederationError(f"synthetic_count={config.synthetic_count} but no synthetic pool")
        synthetic_batches = pool.batches(t, config.synthetic_count, config.batch_size)

    snapshot = params.copy()

    def work(shard):
        return local_update(snapshot, shard, config, t, synthetic_batches)

    workers = min(_threads(), len(shards))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(work, shards))
    else:
        results = [work(s) for s in shards]

    new_params, weights = aggregate(
        [(p, s.n_k, s.client_id) for (p, _), s in zip(results, shards)], return_weights=True
    )
    ids = sorted(s.client_id for s in shards)
    by_id = {s.client_id: (s, r) for s, r in zip(shards, results)}
    val_acc, val_auc = [], []
    for cid in ids:
        acc, auc = evaluate_model(new_params, by_id[cid][0], "val")
        val_acc.append(acc)
        val_auc.append(auc)
    record = RoundRecord(
        round=t + 1,
        client_ids=ids,
        train_loss=[by_id[c][1][1] for c in ids],
        val_acc=val_acc,
        val_auc=val_auc,
        weights=weights,
    )
    return FederationState(new_params, t + 1, server_opt), record


def initial_state(seed: int = 0) -> FederationState:
    return FederationState(build_classifier(seed).params().copy(), 0, None)


def run_federation(
    config: FederationConfig,
    shards: list[ClientShard],
    pool: SyntheticPool | None = None,
    state: FederationState | None = None,
    records: list[RoundRecord] | None = None,
    best: tuple[ParamSet, int, float | None] | None = None,
    stop_after: int | None = None,
    on_round=None,
) -> FederationResult:
    """Run rounds until ``config.rounds`` (or ``stop_after``) and keep the best-validated model.

    ``state``, ``records`` and ``best`` resume an interrupted run. Ties in
    average validation AUC keep the earliest round.
    """
    if not shards:
        raise FederationError("no clients")
    state = state or initial_state(config.seed)
    records = list(records or [])
    best_params, best_round, best_auc = best if best else (state.params, state.round, None)
    last = config.rounds if stop_after is None else min(config.rounds, stop_after)
    with threadpool_limits(limits=1):
        while state.round < last:
            state, record = run_round(state, config, shards, pool)
            records.append(record)
            avg = record.avg_val_auc
            if best_round == 0 or (avg is not None and (best_auc is None or avg > best_auc)):
                best_params, best_round, best_auc = state.params, record.round, avg
            if on_round is not None:
                on_round(state, record, (best_params, best_round, best_auc))
    return FederationResult(best_params, best_round, best_auc, records, state)


def select_best_round(avg_aucs: list[float | None]) -> int:
    """1-based index of the highest average AUC, earliest on ties."""
    best, best_round = None, 1
    for i, a in enumerate(avg_aucs, start=1):
        if a is not None and (best is None or a > best):
            best, best_round = a, i
    return best_round


# ------------------------------------------------------------- persistence


def fmt(v: float | None) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.6g}"


ROUND_LOG_HEADER = "round,client,train_loss,val_acc,val_auc,avg_val_auc\n"


def round_log_rows(record: RoundRecord) -> str:
    return "".join(
        f"{record.round},{cid},{fmt(loss)},{fmt(acc)},{fmt(auc)},{fmt(record.avg_val_auc)}\n"
        for cid, loss, acc, auc in zip(record.client_ids, record.train_loss, record.val_acc, record.val_auc)
    )


def write_round_log(path, records: list[RoundRecord]) -> None:
    formats.write_atomic(path, (ROUND_LOG_HEADER + "".join(round_log_rows(r) for r in records)).encode("utf-8"))


def save_state(path, state: FederationState) -> None:
    opt = state.server_opt.state_tensors() if state.server_opt is not None else []
    formats.save_checkpoint(path, formats.Checkpoint(state.params, state.round, opt))


def load_state(path, config: FederationConfig) -> FederationState:
    expected = build_classifier().params().fingerprint
    ckpt = formats.load_checkpoint(path, expected)
    opt = None
    if ckpt.optimizer:
        opt = nn.AdamW(config.lr_synthetic, weight_decay=config.weight_decay)
        opt.load_state(ckpt.optimizer)
    return FederationState(ckpt.params, ckpt.round, opt)
