"""Closed-loop episodes, the rule-based PAS ego and episode logs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from socialmpc.core import Config, VehicleParams
from socialmpc.planner import steering_limit
from socialmpc.sim.scenario import Scenario
from socialmpc.sim.traffic import IdmParams, MobilParams, idm_accel, lane_change_incentive
from socialmpc.sim.world import LaneChange, World

ROUTE_BIAS = 3.0   # m/s^2 added to MOBIL's incentive for moves toward the target lane
HEADWAY_MIN_SPEED = 0.5


class EgoPlanner(Protocol):
    name: str

    def reset(self, world: World) -> None: ...

    def __call__(self, world: World) -> tuple[float, float]: ...


# --------------------------------------------------------------------------- #
# PAS baseline

@dataclass
class PasPlanner:
    """IDM car following plus MOBIL lane choice biased toward the off-ramp lane.

    A lane change is rendered as a quintic lateral spline tracked by
    proportional heading control."""

    cfg: Config = field(default_factory=Config)
    decision_interval: float = 0.5
    k_y: float = 0.8
    k_psi: float = 3.0
    name: str = "pas"
    idm: IdmParams = field(default_factory=lambda: IdmParams(v0=25.0))
    mobil: MobilParams = field(default_factory=MobilParams)
    _lc: LaneChange | None = None
    _next_decision: float = 0.0

    def reset(self, world: World) -> None:
        self.idm = IdmParams(v0=world.scn.v_des)
        self._lc = None
        self._next_decision = 0.0
        world.ego.idm = self.idm

    def __call__(self, world: World) -> tuple[float, float]:
        return pas_planner_step(world, self)


def pas_planner_step(world: World, pas: PasPlanner | None = None) -> tuple[float, float]:
    """One PAS control (a, delta_f) for the ego of ``world``."""
    if pas is None:
        pas = PasPlanner()
        pas.reset(world)
    ego, scn, cfg = world.ego, world.scn, pas.cfg
    lists = world._lane_lists()
    if pas._lc is None and world.t + 1e-9 >= pas._next_decision:
        pas._next_decision = world.t + pas.decision_interval
        lane = scn.lane_of(ego.y)
        if lane != scn.target_lane:
            step = -1 if scn.target_lane < lane else 1
            cur = world.lane_context(ego, lane, lists)
            tgt = world.lane_context(ego, lane + step, lists)
            gain = lane_change_incentive(ego.v, ego.length, cur, tgt, pas.idm, pas.mobil, bias=ROUTE_BIAS)
            if gain is not None and gain > pas.mobil.a_th:
                pas._lc = LaneChange(lane, lane + step, ego.y, scn.lane_center(lane + step), world.t)
                ego.lc = pas._lc
    if pas._lc is not None and pas._lc.done(world.t):
        pas._lc = None
        ego.lc = None
    lists = world._lane_lists()
    a = world.idm_for(ego, lists)
    if pas._lc is not None:
        y_ref, vy_ref = pas._lc.reference(world.t + world.dt)
    else:
        y_ref, vy_ref = scn.lane_center(scn.lane_of(ego.y)), 0.0
    v = max(ego.v, cfg.v_floor)
    psi_cmd = math.atan2(vy_ref + pas.k_y * (y_ref - ego.y), v)
    psi_cmd = min(max(psi_cmd, -cfg.psi_max), cfg.psi_max)
    delta = pas.k_psi * (psi_cmd - ego.psi) * world.ego_params.wheelbase / v
    d_lim = steering_limit(cfg, ego.v, world.ego_params.wheelbase)
    delta = min(max(delta, -d_lim), d_lim)
    a = min(max(a, cfg.a_min), cfg.a_max)
    return a, delta


# --------------------------------------------------------------------------- #
# episode log

@dataclass
class EpisodeLog:
    scenario: dict
    planner: str
    dt: float
    steps: list[dict] = field(default_factory=list)
    outcome: str = "failure"
    headways: list[float | None] = field(default_factory=list)
    ego_speeds: list[float] = field(default_factory=list)
    lane_changes: list[dict] = field(default_factory=list)
    duration: float = 0.0
    spawned: int = 0
    degraded_plans: int = 0
    collision_pair: tuple[int, int] | None = None

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "planner": self.planner,
            "outcome": self.outcome,
            "duration": self.duration,
            "steps": len(self.steps),
            "spawned": self.spawned,
            "degraded_plans": self.degraded_plans,
            "lane_changes": self.lane_changes,
            "collision_pair": list(self.collision_pair) if self.collision_pair else None,
            "mean_speed": float(np.mean(self.ego_speeds)) if self.ego_speeds else None,
        }

    def write(self, jsonl_path: str | Path, summary_path: str | Path | None = None) -> None:
        jsonl_path = Path(jsonl_path)
        with open(jsonl_path, "w") as fh:
            for rec, hw in zip(self.steps, self.headways):
                fh.write(json.dumps({**rec, "headway": hw}, separators=(",", ":")) + "\n")
        summary_path = Path(summary_path) if summary_path else jsonl_path.with_suffix(".summary.json")
        summary_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, jsonl_path: str | Path, summary_path: str | Path | None = None) -> "EpisodeLog":
        jsonl_path = Path(jsonl_path)
        summary_path = Path(summary_path) if summary_path else jsonl_path.with_suffix(".summary.json")
        summ = json.loads(summary_path.read_text())
        steps, headways = [], []
        with open(jsonl_path) as fh:
            for line in fh:
                rec = json.loads(line)
                headways.append(rec.pop("headway"))
                steps.append(rec)
        log = cls(summ["scenario"], summ["planner"], float(summ["scenario"].get("dt", 0.1)), steps,
                  summ["outcome"], headways, [r["ego"][2] for r in steps], summ["lane_changes"],
                  summ["duration"], summ["spawned"], summ.get("degraded_plans", 0),
                  tuple(summ["collision_pair"]) if summ.get("collision_pair") else None)
        return log


# --------------------------------------------------------------------------- #
# running episodes

def ego_headway(world: World) -> float | None:
    ego = world.ego
    if ego.v < HEADWAY_MIN_SPEED:
        return None
    lane = world.scn.lane_of(ego.y)
    best = None
    for v in world.vehicles.values():
        if v is ego or world.scn.lane_of(v.y) != lane or v.s <= ego.s:
            continue
        if best is None or v.s < best.s:
            best = v
    if best is None:
        return None
    gap = best.s - best.length / 2.0 - (ego.s + ego.length / 2.0)
    return gap / ego.v


class _LaneChangeTracker:
    """Detects ego lateral manoeuvres that end in a different lane."""

    def __init__(self, scn: Scenario, vy_on: float = 0.2):
        self.scn = scn
        self.vy_on = vy_on
        self.active: dict | None = None
        self.events: list[dict] = []

    def update(self, t: float, s: float, y: float, v: float, psi: float) -> None:
        vy = v * math.sin(psi)
        lane = self.scn.lane_of(y)
        if self.active is None:
            if abs(vy) > self.vy_on:
                self.active = {"t_start": t, "s_start": s, "from_lane": lane}
        elif abs(vy) <= self.vy_on:
            if lane != self.active["from_lane"]:
                self.events.append({**self.active, "t_end": t, "s_end": s, "to_lane": lane})
            self.active = None

    def finish(self, t: float, s: float, y: float) -> None:
        lane = self.scn.lane_of(y)
        if self.active is not None and lane != self.active["from_lane"]:
            self.events.append({**self.active, "t_end": t, "s_end": s, "to_lane": lane})
        self.active = None


def run_episode(scn: Scenario, ego_planner: str | EgoPlanner = "pas", model=None, cfg: Config | None = None,
                record: bool = True, on_step: Callable[[World, tuple[float, float]], None] | None = None
                ) -> EpisodeLog:
    """Simulate one episode until success, collision, missing the ramp or the horizon."""
    cfg = cfg or Config()
    planner = make_planner(ego_planner, model, cfg)
    world = World(scn, with_ego=True, history_len=cfg.T_h + 1, ego_params=VehicleParams())
    planner.reset(world)
    log = EpisodeLog(scn.to_dict(), planner.name, scn.dt)
    tracker = _LaneChangeTracker(scn)
    n_steps = int(round(scn.horizon_s / scn.dt))
    ego = world.ego
    for _ in range(n_steps):
        u = planner(world)
        u = (float(u[0]), float(u[1]))
        if on_step is not None:
            on_step(world, u)
        if record:
            log.steps.append({"t": world.step_index, "ego": [ego.s, ego.y, ego.v, ego.psi], "ego_u": list(u),
                              "vehicles": world.snapshot()})
        log.headways.append(ego_headway(world))
        log.ego_speeds.append(ego.v)
        world.step(u)
        tracker.update(world.t, ego.s, ego.y, ego.v, ego.psi)
        hits = [p for p in world.collisions() if 0 in p]
        if hits:
            log.outcome = "collision"
            log.collision_pair = hits[0]
            break
        if scn.lane_of(ego.y) == scn.target_lane and scn.ramp_start <= ego.s < scn.ramp_end:
            log.outcome = "success"
            break
        if ego.s >= scn.ramp_end:
            log.outcome = "failure"
            break
    tracker.finish(world.t, ego.s, ego.y)
    log.duration = world.t
    log.lane_changes = tracker.events
    log.spawned = world.spawned
    log.degraded_plans = getattr(planner, "degraded", 0)
    return log


def make_planner(ego_planner, model, cfg: Config) -> EgoPlanner:
    if not isinstance(ego_planner, str):
        return ego_planner
    if ego_planner == "pas":
        return PasPlanner(cfg)
    if ego_planner == "mpcformer":
        if model is None:
            raise ValueError("the mpcformer planner needs a trained model")
        from socialmpc.planner import MpcFormerPlanner

        return MpcFormerPlanner(model, cfg)
    raise ValueError(f"unknown planner {ego_planner!r}; expected 'pas' or 'mpcformer'")
