"""Tenth-scale synthetic-volume sweep through the CLI: none vs moderate vs overload.

    python scripts/directional_run.py [--out runs/directional] [--sources ddpm,dcgan]

Runs datagen, train-gen for every source, then ablate, and prints the
5-seed median of mean test AUC at each count.
"""

import argparse
import csv
import statistics
import sys
import time
from pathlib import Path

from fedsynth.cli import main


def run(step: list[str], common: list[str]) -> None:
    t0 = time.perf_counter()
    rc = main(step + common)
    print(f"{' '.join(step):<34} rc={rc} {time.perf_counter() - t0:7.1f}s", flush=True)
    if rc:
        sys.exit(rc)


def medians(sweep_csv: Path) -> dict[tuple[str, int], float]:
    by_cell: dict[tuple[str, int], list[float]] = {}
    with open(sweep_csv) as f:
        for row in csv.DictReader(f):
            if row["seed"] != "mean" and row["mean_auc"]:
                by_cell.setdefault((row["source"], int(row["count"])), []).append(float(row["mean_auc"]))
    return {k: statistics.median(v) for k, v in by_cell.items()}


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/directional")
    ap.add_argument("--sources", default="ddpm")
    ap.add_argument("--rounds", default="30")
    args = ap.parse_args()
    out = Path(args.out)
    common = [
        "--scale_fraction", "0.1",
        "--rounds", args.rounds,
        "--data_dir", str(out / "data"),
        "--gen_dir", str(out / "gen"),
        "--out_dir", str(out / "sweep"),
        "--sweep_sources", args.sources,
    ]
    run(["datagen"], common)
    for source in args.sources.split(","):
        run(["train-gen", "--generator", source], common)
    run(["ablate"], common)
    for (source, count), med in sorted(medians(out / "sweep" / "sweep.csv").items()):
        print(f"{source:>6} n={count:<5d} median mean test AUC {med:.4f}")
