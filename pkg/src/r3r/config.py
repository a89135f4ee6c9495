"""Flat ``key = value`` run configuration with section prefixes."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Optional

from r3r.dynamics import DubinsParams
from r3r.environment import CityLike, MapFile, OpenArena, Scenario, Swap, generate_scenario
from r3r.geometry import R3RParams
from r3r.planner import PlannerConfig
from r3r.protocol import ReplanTrigger, TriggerPolicy
from r3r.simulator import SimConfig
from r3r.validation import GatekeeperConfig


class ConfigError(ValueError):
    pass


def _opt_float(s: str) -> Optional[float]:
    return None if s.strip().lower() in ("auto", "none", "") else float(s)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _float_list(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(",", " ").split())


# key -> (parser, default, help)
SCHEMA: dict[str, tuple[Any, Any, str]] = {
    "scenario.kind": (str, "swap", "swap | city | map | open"),
    "scenario.n_agents": (int, 8, "number of agents"),
    "scenario.seed": (int, 0, "scenario and run seed"),
    "scenario.duration": (float, 300.0, "simulated seconds"),
    "scenario.radius": (_opt_float, None, "swap circle radius (auto: smallest safe)"),
    "scenario.size": (float, 100.0, "city side length, meters"),
    "scenario.side": (float, 100.0, "open arena side length, meters"),
    "scenario.map": (str, "", "occupancy map file for kind = map"),
    "scenario.resolution": (float, 0.5, "grid resolution, meters per cell"),
    "scenario.inflation": (_opt_float, None, "obstacle inflation, meters (auto: delta)"),
    "params.delta": (float, 0.5, "collision radius, meters"),
    "params.r_comm": (float, 16.0, "communication radius, meters"),
    "dyn.v": (float, 1.0, "forward speed, m/s"),
    "dyn.omega_max": (float, 1.0, "turn-rate bound, rad/s"),
    "sim.sim_dt": (float, 0.02, "trace sampling step, s"),
    "sim.oracle_dt": (float, 0.02, "oracle sampling step, s"),
    "sim.goal_tolerance": (float, 1.0, "goal radius, meters"),
    "sim.deadlock_window": (float, 30.0, "seconds without a commit that count as deadlock"),
    "sim.goal_clearance": (float, 1.0, "obstacle clearance of the cost-to-go field, meters"),
    "sim.log_timing": (_bool, False, "write measured replan_ms into events.log (not replayable bitwise)"),
    "trigger.policy": (str, "hybrid", "periodic | near_switch | hybrid"),
    "trigger.period": (float, 1.0, "periodic replan interval, s"),
    "trigger.lead": (float, 0.5, "near-switch lead time, s"),
    "gatekeeper.horizon": (float, 4.0, "planning horizon T_H, s"),
    "gatekeeper.switch_grid": (int, 21, "switch times tried per replan"),
    "gatekeeper.check_dt": (float, 0.05, "validity sampling step, s"),
    "gatekeeper.margin": (_opt_float, None, "safe-set margin, meters (auto: v * check_dt)"),
    "planner.max_iterations": (int, 50, "tree expansions per plan"),
    "planner.goal_bias": (float, 0.1, "probability of sampling the subgoal"),
    "planner.step_arc_length": (float, 1.0, "longest tree edge, meters"),
    "planner.rewire_radius": (float, 1.5, "choose-parent and rewire radius, meters"),
    "planner.dt": (float, 0.05, "nominal sampling step, s"),
    "planner.check_dt": (float, 0.1, "edge check step, s"),
    "planner.clearance": (float, 0.1, "edge clearance from unsafe space, meters"),
    "planner.neighbor_margin": (float, 0.25, "extra neighbor distance while planning, meters"),
    "planner.goal_tolerance": (float, 1.0, "tree goal radius, meters"),
    "planner.omega_levels": (int, 7, "turn rates tried when steering (odd)"),
    "sweep.n": (int, 16, "agents per density trial"),
    "sweep.sides": (_float_list, (120.0, 85.0, 60.0), "arena sides of the density sweep"),
    "sweep.duration": (float, 60.0, "simulated seconds per density trial"),
}


def resolve_key(key: str) -> str:
    """Full key for ``key``, which may be any unique dotted suffix of one."""
    key = key.strip()
    if key in SCHEMA:
        return key
    hits = [k for k in SCHEMA if k.endswith("." + key)]
    if len(hits) == 1:
        return hits[0]
    if not hits:
        raise ConfigError(f"unknown config key {key!r}")
    raise ConfigError(f"ambiguous config key {key!r}: {', '.join(sorted(hits))}")


def _format(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, tuple):
        return ", ".join(f"{x:g}" for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: d for k, (_, d, _) in SCHEMA.items()})

    def set(self, key: str, raw: str) -> None:
        full = resolve_key(key)
        parser = SCHEMA[full][0]
        try:
            self.values[full] = parser(raw.strip())
        except ValueError as e:
            raise ConfigError(f"bad value for {full}: {raw!r} ({e})") from None

    def __getitem__(self, key: str):
        return self.values[resolve_key(key)]

    def dump(self) -> str:
        lines = []
        section = None
        for k in SCHEMA:
            sec = k.split(".")[0]
            if sec != section:
                if section is not None:
                    lines.append("")
                section = sec
            lines.append(f"{k} = {_format(self.values[k])}  # {SCHEMA[k][2]}")
        return "\n".join(lines) + "\n"

    # builders

    def params(self) -> R3RParams:
        return R3RParams.from_comm(self["params.r_comm"], self["params.delta"])

    def dyn(self) -> DubinsParams:
        return DubinsParams(self["dyn.v"], self["dyn.omega_max"])

    def sim(self) -> SimConfig:
        trig = ReplanTrigger(TriggerPolicy(self["trigger.policy"]), self["trigger.period"], self["trigger.lead"])
        return SimConfig(
            self["sim.sim_dt"],
            trig,
            self["sim.goal_tolerance"],
            self["sim.deadlock_window"],
            self["sim.oracle_dt"],
            self["sim.goal_clearance"],
            self["sim.log_timing"],
        )

    def gatekeeper(self) -> GatekeeperConfig:
        return GatekeeperConfig(
            self["gatekeeper.horizon"],
            self["gatekeeper.switch_grid"],
            self["gatekeeper.check_dt"],
            self["gatekeeper.margin"],
        )

    def planner(self) -> PlannerConfig:
        kw = {f.name: self.values[f"planner.{f.name}"] for f in fields(PlannerConfig) if f"planner.{f.name}" in SCHEMA}
        return PlannerConfig(horizon=self["gatekeeper.horizon"], **kw)

    def kind(self):
        k, n = self["scenario.kind"], self["scenario.n_agents"]
        if k == "swap":
            return Swap(n, self["scenario.radius"])
        if k == "city":
            return CityLike(n, self["scenario.size"])
        if k == "map":
            if not self["scenario.map"]:
                raise ConfigError("scenario.kind = map needs scenario.map")
            return MapFile(self["scenario.map"], n)
        if k == "open":
            return OpenArena(n, self["scenario.side"])
        raise ConfigError(f"unknown scenario.kind {k!r}")

    def scenario(self, seed: Optional[int] = None) -> Scenario:
        return generate_scenario(
            self.kind(),
            self.params(),
            self.dyn(),
            self["scenario.seed"] if seed is None else seed,
            duration=self["scenario.duration"],
            resolution=self["scenario.resolution"],
            inflation=self["scenario.inflation"],
        )

    def validate(self) -> "RunConfig":
        """Build every component once so bad values surface as config errors."""
        try:
            if self["scenario.n_agents"] < 1:
                raise ConfigError("scenario.n_agents must be at least 1")
            if not math.isfinite(self["scenario.duration"]) or self["scenario.duration"] <= 0:
                raise ConfigError("scenario.duration must be positive")
            self.params(), self.dyn(), self.sim(), self.gatekeeper(), self.planner(), self.kind()
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from None
        return self


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base or RunConfig.defaults()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = line.split("=", 1)
        cfg.set(key, value)
    return cfg


def load_config(path: Optional[str | Path], overrides: Iterable[str] = ()) -> RunConfig:
    cfg = RunConfig.defaults()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        parse_config(text, cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k, v)
    return cfg.validate()
