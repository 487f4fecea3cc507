"""Off-ramp scenario description and its TOML file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import tomli

from socialmpc.core import ConfigError

CAPACITY_VEH_H_LANE = 2200.0
VC_LEVELS = (0.4, 0.6, 0.8)


@dataclass(frozen=True)
class Scenario:
    """A straight multi-lane road with an off-ramp reached from the rightmost lane (lane 0)."""

    lanes: int = 3
    lane_width: float = 3.5
    length: float = 800.0
    ramp_start: float = 350.0
    ramp_end: float = 600.0
    vc_ratio: float = 0.6
    style: str = "normal"
    horizon_s: float = 60.0
    seed: int = 0
    ego_s0: float = 60.0
    ego_v0: float = 22.0
    ego_lane: int = 2
    target_lane: int = 0
    v_des: float = 25.0
    dt: float = 0.1

    def __post_init__(self):
        if self.lanes < 1:
            raise ConfigError("lanes must be at least 1")
        if self.lane_width <= 0 or self.length <= 0:
            raise ConfigError("lane_width and length must be positive")
        if not (0.0 <= self.ramp_start < self.ramp_end <= self.length):
            raise ConfigError("off-ramp window must lie within the road length")
        if not (0 <= self.target_lane < self.lanes) or not (0 <= self.ego_lane < self.lanes):
            raise ConfigError("target_lane and ego_lane must exist on the road")
        if self.vc_ratio < 0:
            raise ConfigError("vc_ratio must be non-negative")
        if self.style not in ("normal", "aggressive"):
            raise ConfigError(f"style must be 'normal' or 'aggressive', got {self.style!r}")
        if self.horizon_s <= 0 or self.dt <= 0:
            raise ConfigError("horizon_s and dt must be positive")
        if not (0.0 <= self.ego_s0 < self.length):
            raise ConfigError("ego_s0 must lie on the road")

    @property
    def flow_per_lane(self) -> float:
        """Mean arrival rate per lane in vehicles per second."""
        return self.vc_ratio * CAPACITY_VEH_H_LANE / 3600.0

    def lane_center(self, lane: int) -> float:
        return (lane + 0.5) * self.lane_width

    def lane_of(self, y: float) -> int:
        return int(min(max(y // self.lane_width, 0), self.lanes - 1))

    def replace(self, **kw) -> "Scenario":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def scenario_from_mapping(data: Mapping[str, Any]) -> Scenario:
    known = {f.name for f in dataclasses.fields(Scenario)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    return Scenario(**dict(data))


def load_scenario(path: str | Path) -> Scenario:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"scenario file not found: {p}")
    with open(p, "rb") as fh:
        try:
            data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    return scenario_from_mapping(data.get("scenario", data))


def dump_scenario(scn: Scenario) -> str:
    lines = ["[scenario]"]
    for k, v in scn.to_dict().items():
        lines.append(f"{k} = {v!r}" if not isinstance(v, str) else f'{k} = "{v}"')
    return "\n".join(lines) + "\n"
