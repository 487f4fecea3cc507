"""Synthetic training frames cut from IDM/MOBIL traffic."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from socialmpc.core import SLOTS, VEH_FEATURES, Frame, VehicleParams, seed_stream, write_frames
from socialmpc.sim.scenario import Scenario
from socialmpc.sim.world import World, lane_map_for, select_slots

log = logging.getLogger(__name__)


def record_traffic(scn: Scenario) -> list[dict[int, np.ndarray]]:
    """Run ego-free traffic for the scenario horizon; one {id: (s, y, v, a, psi)} per step."""
    world = World(scn, with_ego=False, history_len=1)
    trace = [{vid: v.features() for vid, v in world.vehicles.items()}]
    for _ in range(int(round(scn.horizon_s / scn.dt))):
        world.step()
        trace.append({vid: v.features() for vid, v in world.vehicles.items()})
    return trace


def frames_from_trace(trace: Sequence[dict[int, np.ndarray]], scn: Scenario, ego_id: int, T_h: int = 40,
                      N: int = 50, stride: int = 10, prefix: str = "") -> list[Frame]:
    """Slide (T_h + N)-step windows over ``trace`` centred on ``ego_id``.

    Slot membership is fixed at the last history step; a neighbour whose track
    does not span the whole window is marked absent.  Windows where the ego
    track is incomplete are skipped."""
    frames = []
    k = len(SLOTS)
    params = tuple(VehicleParams() for _ in range(k))
    for c in range(T_h - 1, len(trace) - N, stride):
        span = range(c - T_h + 1, c + N + 1)
        if any(ego_id not in trace[j] for j in span):
            continue
        e = trace[c][ego_id]
        others = [(vid, f[0], f[1]) for vid, f in trace[c].items() if vid != ego_id]
        ids = [ego_id] + select_slots((ego_id, e[0], e[1]), others, scn)
        hist = np.zeros((k, T_h, VEH_FEATURES))
        fut = np.zeros((k, N, VEH_FEATURES))
        maps = np.zeros((k,) + lane_map_for(scn, 0.0).shape)
        present = np.zeros(k, dtype=bool)
        for i, vid in enumerate(ids):
            if vid is None or any(vid not in trace[j] for j in span):
                continue
            track = np.stack([trace[j][vid] for j in span])
            hist[i], fut[i] = track[:T_h], track[T_h:]
            maps[i] = lane_map_for(scn, trace[c][vid][1])
            present[i] = True
        frames.append(Frame(f"{prefix}veh{ego_id}-t{c}", scn.dt, hist, fut, maps, present, params))
    return frames


def generate_dataset(scenarios: Scenario | Iterable[Scenario], episodes: int, out: str | Path | None = None,
                     T_h: int = 40, N: int = 50, stride_s: float = 1.0, egos_per_episode: int = 4,
                     seed: int | None = None) -> list[Frame]:
    """Frames from ``episodes`` traffic runs cycling through ``scenarios``.

    Episode ``e`` uses the scenario seed ``base + e``; designated egos are drawn
    from vehicles that stay on the road for at least one full window."""
    family = [scenarios] if isinstance(scenarios, Scenario) else list(scenarios)
    if not family:
        raise ValueError("empty scenario family")
    base = family[0].seed if seed is None else seed
    pick = seed_stream(base, "dataset-egos")
    frames: list[Frame] = []
    for e in range(episodes):
        scn = family[e % len(family)].replace(seed=base + e)
        trace = record_traffic(scn)
        window = T_h + N
        lifetimes: dict[int, int] = {}
        for step in trace:
            for vid in step:
                lifetimes[vid] = lifetimes.get(vid, 0) + 1
        eligible = sorted(v for v, n in lifetimes.items() if n >= window)
        if not eligible:
            continue
        chosen = pick.choice(eligible, size=min(egos_per_episode, len(eligible)), replace=False)
        stride = max(1, int(round(stride_s / scn.dt)))
        for vid in sorted(int(v) for v in chosen):
            frames.extend(frames_from_trace(trace, scn, vid, T_h, N, stride, prefix=f"ep{e}-"))
    log.info("generated %d frames from %d episodes", len(frames), episodes)
    if out is not None:
        write_frames(out, frames)
    return frames
