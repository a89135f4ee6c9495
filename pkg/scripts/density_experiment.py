"""Replan cost against local density.

Two experiments: a fixed-N sweep over arena sides (cost should rise with
density) and a fixed-density scaling run over (N, area) pairs (cost should
stay flat as N grows).

    python3 scripts/density_experiment.py [--trials 20] [--duration 20] [--out density.csv]
"""

import argparse
import math

import numpy as np

from r3r.dynamics import DubinsParams
from r3r.environment import OpenArena, generate_scenario
from r3r.geometry import R3RParams
from r3r.simulator import density_csv, density_sweep, run, summarize_density


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=16)
    ap.add_argument("--sides", type=float, nargs="+", default=[120.0, 85.0, 60.0])
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--duration", type=float, default=20.0)
    ap.add_argument("--scaling-seeds", type=int, default=2)
    ap.add_argument("--out", help="per-trial CSV of the density sweep")
    args = ap.parse_args()

    rows = density_sweep(args.n, args.sides, args.trials, duration=args.duration)
    if args.out:
        with open(args.out, "w") as f:
            f.write(density_csv(rows))
    print(f"fixed N = {args.n}, {args.trials} trials per side")
    print(f"{'side m':>7} {'density':>9} {'lambda':>7} {'replan ms':>14} {'fail rate':>10}")
    for s in summarize_density(rows):
        print(
            f"{s['side']:>7.1f} {s['density']:>9.5f} {s['expected_neighbors']:>7.2f} "
            f"{s['mean_replan_ms']:>8.2f} +-{s['std_replan_ms']:<4.2f} {s['failure_rate']:>10.5f}"
        )

    params, dyn = R3RParams.from_comm(16.0, 0.5), DubinsParams()
    print(f"\nfixed density, {args.scaling_seeds} seeds, 30 s each")
    means = []
    for n, side in [(16, 60.0), (32, 60.0 * math.sqrt(2)), (64, 120.0)]:
        ms = [
            run(generate_scenario(OpenArena(n, side), params, dyn, seed=s, duration=30.0)).metrics.mean_replan_ms
            for s in range(args.scaling_seeds)
        ]
        means.append(float(np.mean(ms)))
        print(f"N={n:<3} side={side:6.1f}  replan {means[-1]:.2f} ms")
    print(f"max/min = {max(means) / min(means):.2f}")


if __name__ == "__main__":
    main()
