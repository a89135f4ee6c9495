"""Safety and success over seeds for the shipped swap and city configs.

    python3 scripts/table1.py [--seeds 5] [--configs swap8 swap16 city16 city32] [--out runs/table1]
"""

import argparse
import time
from pathlib import Path

import numpy as np

from r3r.config import load_config
from r3r.simulator import run, write_run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--configs", nargs="+", default=["swap8", "swap16", "city16", "city32"])
    ap.add_argument("--out", help="write every run directory under this path")
    args = ap.parse_args()

    print(f"{'scenario':<10} {'safety %':>9} {'success %':>10} {'replan ms':>10} {'avg nb':>7} {'deadlocks':>9} {'wall s':>7}")
    for name in args.configs:
        cfg = load_config(CONFIGS / f"{name}.cfg")
        rows = []
        t0 = time.perf_counter()
        for seed in range(args.seeds):
            res = run(cfg.scenario(seed), cfg.sim(), cfg.planner(), cfg.gatekeeper())
            if args.out:
                write_run(Path(args.out) / f"{name}_seed{seed}", res)
            m = res.metrics
            rows.append((m.safety_pct, m.success_pct, m.mean_replan_ms, m.avg_neighbors_per_replan, m.deadlocked_agents))
        wall = time.perf_counter() - t0
        s, ok, ms, nb, dl = np.array(rows).mean(axis=0)
        print(f"{name:<10} {s:>9.2f} {ok:>10.2f} {ms:>10.2f} {nb:>7.2f} {dl:>9.1f} {wall:>7.1f}")


if __name__ == "__main__":
    main()
