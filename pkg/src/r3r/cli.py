"""Command line entry point: run, batch, check, export and sweep."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from r3r.config import ConfigError, RunConfig, load_config
from r3r.environment import MapParseError, ScenarioError
from r3r.oracle import oracle_check
from r3r.protocol import ArbitrationError
from r3r.simulator import (
    CSV_HEADER,
    InvariantError,
    density_csv,
    density_sweep,
    load_traces,
    metrics_row,
    run,
    scenario_from_files,
    summarize_density,
    write_run,
)

EXIT_OK, EXIT_UNSAFE, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3


def _err(msg: str) -> None:
    print(f"r3r: {msg}", file=sys.stderr)


def _run_one(cfg: RunConfig, seed: int, out: Path):
    sc = cfg.scenario(seed)
    out.mkdir(parents=True, exist_ok=True)
    res = run(sc, cfg.sim(), cfg.planner(), cfg.gatekeeper(), log_path=out / "events.log")
    write_run(out, res, write_events=False)
    eff = RunConfig(dict(cfg.values))
    eff.values["scenario.seed"] = seed
    (out / "effective.cfg").write_text(eff.dump())
    return res


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set)
    seed = cfg["scenario.seed"] if args.seed is None else args.seed
    out = Path(args.out or "runs/run")
    res = _run_one(cfg, seed, out)
    m = res.metrics
    print(CSV_HEADER)
    print(metrics_row(res.scenario.name, len(res.scenario.agents), seed, m))
    for v in res.violations:
        print(v.line())
    return EXIT_OK if m.safety_violations == 0 else EXIT_UNSAFE


def cmd_batch(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    else:
        if args.trials < 1:
            raise ConfigError("--trials must be at least 1")
        base = cfg["scenario.seed"] if args.seed is None else args.seed
        seeds = [base + k for k in range(args.trials)]
    if len(set(seeds)) != len(seeds):
        _err("warning: duplicate seeds in batch; their rows will repeat")
    out = Path(args.out or "runs/batch")
    rows, worst = [], EXIT_OK
    safety, success = [], []
    for k, seed in enumerate(seeds):
        res = _run_one(cfg, seed, out / f"trial_{k:03d}_seed_{seed}")
        m = res.metrics
        rows.append(metrics_row(res.scenario.name, len(res.scenario.agents), seed, m))
        safety.append(m.safety_pct)
        success.append(m.success_pct)
        if m.safety_violations:
            worst = EXIT_UNSAFE
        print(rows[-1], flush=True)
    (out / "metrics.csv").write_text(CSV_HEADER + "\n" + "\n".join(rows) + "\n")
    summary = (
        "trials,mean_safety_pct,min_safety_pct,mean_success_pct,min_success_pct\n"
        f"{len(seeds)},{np.mean(safety):.2f},{np.min(safety):.2f},{np.mean(success):.2f},{np.min(success):.2f}\n"
    )
    (out / "summary.csv").write_text(summary)
    print(summary, end="")
    return worst


def _load_run(run_dir: Path):
    meta_f, map_f = run_dir / "scenario.json", run_dir / "map.txt"
    if not (meta_f.is_file() and map_f.is_file()):
        raise FileNotFoundError(f"{run_dir} has no scenario snapshot")
    sc = scenario_from_files(json.loads(meta_f.read_text()), map_f.read_text())
    traces = load_traces(run_dir)
    if not traces:
        raise FileNotFoundError(f"{run_dir} has no traces")
    return sc, traces


def cmd_check(args) -> int:
    run_dir = Path(args.run_dir)
    try:
        sc, traces = _load_run(run_dir)
        dt = args.oracle_dt
        if dt is None:
            eff = run_dir / "effective.cfg"
            dt = load_config(eff)["sim.oracle_dt"] if eff.is_file() else 0.02
    except (OSError, ValueError, KeyError, MapParseError) as e:
        _err(str(e))
        return EXIT_CONFIG
    env = sc.env
    found = oracle_check(traces, env.cells, env.resolution, (env.origin.x, env.origin.y), env.inflation, sc.params.delta, dt)
    for v in found:
        print(v.line())
    print(f"{len(found)} violation(s) in {len(traces)} trace(s)")
    return EXIT_OK if not found else EXIT_UNSAFE


def trajectories_svg(run_dir: Path, px_per_m: float = 6.0) -> str:
    """Map, driven paths, final planning circles and goals as a standalone SVG."""
    sc, traces = _load_run(run_dir)
    env = sc.env
    x0, y0, x1, y1 = env.extent
    w, h = (x1 - x0) * px_per_m, (y1 - y0) * px_per_m

    def X(x):
        return (x - x0) * px_per_m

    def Y(y):
        return (y1 - y) * px_per_m

    res = env.resolution
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{h:.0f}" viewBox="0 0 {w:.1f} {h:.1f}">',
        f'<rect width="{w:.1f}" height="{h:.1f}" fill="white"/>',
        '<g class="map" fill="#444">',
    ]
    for iy in range(env.height):
        row = env.cells[iy]
        ix = 0
        while ix < env.width:
            if row[ix]:
                j = ix
                while j < env.width and row[j]:
                    j += 1
                cx, cy = x0 + ix * res, y0 + (iy + 1) * res
                parts.append(
                    f'<rect x="{X(cx):.1f}" y="{Y(cy):.1f}" width="{(j - ix) * res * px_per_m:.1f}" '
                    f'height="{res * px_per_m:.1f}"/>'
                )
                ix = j
            else:
                ix += 1
    parts.append("</g>")
    r_plan = sc.params.r_plan
    for i, rows in sorted(traces.items()):
        if len(rows) == 0:
            continue
        hue = (i * 137) % 360
        color = f"hsl({hue},70%,45%)"
        pts = " ".join(f"{X(x):.1f},{Y(y):.1f}" for x, y in rows[:: max(1, len(rows) // 2000), 1:3])
        parts.append(f'<polyline class="path" data-agent="{i}" fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>')
        ex, ey = rows[-1, 1], rows[-1, 2]
        parts.append(
            f'<circle class="plan-circle" data-agent="{i}" cx="{X(ex):.1f}" cy="{Y(ey):.1f}" r="{r_plan * px_per_m:.1f}" '
            f'fill="none" stroke="{color}" stroke-dasharray="4 3" stroke-width="0.8"/>'
        )
    for i, a in enumerate(sc.agents):
        parts.append(
            f'<circle class="goal" data-agent="{i}" cx="{X(a.goal.x):.1f}" cy="{Y(a.goal.y):.1f}" r="3" fill="black"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_export(args) -> int:
    run_dir = Path(args.run_dir)
    try:
        if args.kind == "trajectories_svg":
            text = trajectories_svg(run_dir)
            default = run_dir / "trajectories.svg"
        else:
            src = run_dir / "density_rows.csv"
            lines = src.read_text().splitlines()
            if len(lines) < 2:
                raise ValueError(f"{src} has no rows")
            head = lines[0].split(",")
            ci = [head.index(c) for c in ("density", "replan_ms", "fail_rate")]
            text = "density,replan_ms,fail_rate\n" + "".join(
                ",".join(line.split(",")[i] for i in ci) + "\n" for line in lines[1:]
            )
            default = run_dir / "density.csv"
    except (OSError, ValueError, KeyError, MapParseError) as e:
        _err(str(e))
        return EXIT_CONFIG
    dest = Path(args.out) if args.out else default
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_text(text)
    print(dest)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.trials < 1:
        raise ConfigError("--trials must be at least 1")
    base = cfg["scenario.seed"] if args.seed is None else args.seed
    rows = density_sweep(
        cfg["sweep.n"],
        list(cfg["sweep.sides"]),
        args.trials,
        base,
        cfg.params(),
        cfg.dyn(),
        cfg["sweep.duration"],
        cfg.sim(),
        cfg.planner(),
        cfg.gatekeeper(),
    )
    out = Path(args.out or "runs/sweep")
    out.mkdir(parents=True, exist_ok=True)
    (out / "density_rows.csv").write_text(density_csv(rows))
    (out / "effective.cfg").write_text(cfg.dump())
    for s in summarize_density(rows):
        print(
            f"side={s['side']:g} density={s['density']:.5f} lambda={s['expected_neighbors']:.2f} "
            f"replan_ms={s['mean_replan_ms']:.2f}+-{s['std_replan_ms']:.2f} fail={s['failure_rate']:.4f}"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="r3r", description="Decentralized R3R multi-agent planning simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("config_path", nargs="?", help="config file (same as --config)")
        p.add_argument("--config", help="config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="seed (batch: first seed)")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("run", help="simulate one scenario")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("batch", help="simulate several seeds")
    common(p)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seeds", help="explicit comma-separated seeds")
    p.set_defaults(func=cmd_batch)
    p = sub.add_parser("sweep", help="fixed-N density sweep in open arenas")
    common(p)
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("check", help="re-verify a run directory with the safety oracle")
    p.add_argument("run_dir")
    p.add_argument("--oracle-dt", type=float, dest="oracle_dt")
    p.set_defaults(func=cmd_check)
    p = sub.add_parser("export", help="write plot-ready files from a run or sweep directory")
    p.add_argument("run_dir")
    p.add_argument("--kind", choices=("trajectories_svg", "density_csv"), default="trajectories_svg")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "config_path", None):
        if args.config:
            _err("give the config either positionally or with --config")
            return EXIT_CONFIG
        args.config = args.config_path
    try:
        return args.func(args)
    except (ConfigError, ScenarioError) as e:
        _err(f"config error: {e}")
        return EXIT_CONFIG
    except (ArbitrationError, InvariantError) as e:
        _err(f"invariant violated, run aborted: {e}")
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
