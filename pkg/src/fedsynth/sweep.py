"""Synthetic-volume ablation: federations over a grid of (source, count, seed)."""

from __future__ import annotations

import dataclasses
import statistics
from collections.abc import Callable
from dataclasses import dataclass, field

from .busgen import ClientShard
from .fedsim import ROUND_LOG_HEADER, FederationConfig, FederationError, RoundRecord, SyntheticPool, fmt, round_log_rows, run_federation
from .metrics import evaluate_model
from .params import ParamSet

SWEEP_HEADER = "source,count,seed,test_acc_busbra_like,test_acc_client2,test_acc_client3,mean_acc,mean_auc\n"


@dataclass
class SweepCell:
    source: str
    count: int
    seed: int
    test_acc: list[float]
    test_auc: list[float | None]
    best_round: int
    records: list[RoundRecord] = field(default_factory=list, repr=False, compare=False)

    @property
    def mean_acc(self) -> float:
        return sum(self.test_acc) / len(self.test_acc)

    @property
    def mean_auc(self) -> float | None:
        defined = [a for a in self.test_auc if a is not None]
        return sum(defined) / len(defined) if defined else None


@dataclass
class SweepResult:
    source: str
    counts: list[int]
    cells: list[SweepCell] = field(default_factory=list)

    def _at(self, count: int) -> list[SweepCell]:
        return [c for c in self.cells if c.count == count]

    def mean_acc(self, count: int) -> float:
        return statistics.fmean(c.mean_acc for c in self._at(count))

    def mean_auc(self, count: int) -> float | None:
        vals = [c.mean_auc for c in self._at(count) if c.mean_auc is not None]
        return statistics.fmean(vals) if vals else None

    def median_auc(self, count: int) -> float | None:
        vals = [c.mean_auc for c in self._at(count) if c.mean_auc is not None]
        return statistics.median(vals) if vals else None

    @property
    def rows(self) -> list[tuple[int, float, float | None]]:
        """One (count, mean test acc, mean test AUC) row per count."""
        return [(n, self.mean_acc(n), self.mean_auc(n)) for n in self.counts]


def client_test_metrics(params: ParamSet, shards: list[ClientShard]) -> tuple[list[float], list[float | None]]:
    accs, aucs = [], []
    for shard in shards:
        acc, auc = evaluate_model(params, shard, "test")
        accs.append(acc)
        aucs.append(auc)
    return accs, aucs


def check_counts(counts: list[int]) -> None:
    if not counts or counts[0] != 0:
        raise FederationError("counts must include 0 (the no-augmentation baseline) first")
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise FederationError("counts must be strictly increasing")


def ablation_sweep(
    base: FederationConfig,
    shards: list[ClientShard],
    pools: dict[str, SyntheticPool],
    counts: list[int],
    seeds: list[int],
    on_cell: Callable[[SweepCell], None] | None = None,
) -> list[SweepResult]:
    """Full federations for every (source, count, seed); the count-0 baseline is shared across sources."""
    check_counts(list(counts))
    baseline: dict[int, SweepCell] = {}
    results = []
    for source, pool in pools.items():
        result = SweepResult(source, list(counts))
        for count in counts:
            for seed in seeds:
                if count == 0 and seed in baseline:
                    cell = dataclasses.replace(baseline[seed], source=source)
                else:
                    cfg = dataclasses.replace(base, synthetic_count=count, seed=seed)
                    run = run_federation(cfg, shards, dataclasses.replace(pool, seed=seed) if count else None)
                    accs, aucs = client_test_metrics(run.best_params, shards)
                    cell = SweepCell(source, count, seed, accs, aucs, run.best_round, run.records)
                    if count == 0:
                        baseline[seed] = cell
                result.cells.append(cell)
                if on_cell is not None:
                    on_cell(cell)
        results.append(result)
    return results


def sweep_csv(results: list[SweepResult]) -> str:
    lines = [SWEEP_HEADER]
    for r in results:
        for count in r.counts:
            at = r._at(count)
            for c in at:
                lines.append(f"{c.source},{c.count},{c.seed},{','.join(fmt(a) for a in c.test_acc)},{fmt(c.mean_acc)},{fmt(c.mean_auc)}\n")
            per_client = [statistics.fmean(c.test_acc[k] for c in at) for k in range(len(at[0].test_acc))]
            lines.append(f"{r.source},{count},mean,{','.join(fmt(a) for a in per_client)},{fmt(r.mean_acc(count))},{fmt(r.mean_auc(count))}\n")
    return "".join(lines)


def series_files(results: list[SweepResult]) -> dict[str, str]:
    """Two-column ``count,value`` series per source and metric."""
    out = {}
    for r in results:
        for metric, getter in (("mean_acc", r.mean_acc), ("mean_auc", r.mean_auc)):
            out[f"series_{r.source}_{metric}.csv"] = f"count,{metric}\n" + "".join(f"{n},{fmt(getter(n))}\n" for n in r.counts)
    return out


def cell_logs(results: list[SweepResult]) -> dict[str, str]:
    """Round log of every cell, keyed ``round_log_<source>_n<count>_s<seed>.csv``."""
    return {
        f"round_log_{c.source}_n{c.count}_s{c.seed}.csv": ROUND_LOG_HEADER + "".join(round_log_rows(r) for r in c.records)
        for r in results
        for c in r.cells
    }
