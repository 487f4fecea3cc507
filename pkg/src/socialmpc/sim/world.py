"""Traffic world: vehicle bookkeeping, spawning, IDM/MOBIL stepping and observation."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from socialmpc.core import (MAP_LANES, SLOTS, VEH_FEATURES, Frame, VehicleParams, seed_stream)
from socialmpc.kinematics import rk4_step
from socialmpc.sim.scenario import Scenario
from socialmpc.sim.traffic import IdmParams, LaneContext, MobilParams, idm_accel, mobil_decide, style_params

LANE_CHANGE_S = 3.0
DECISION_INTERVAL_S = 1.0
SLOT_RADIUS = 80.0
VEH_LENGTH = 4.8
VEH_WIDTH = 1.8


LATERAL_PREVIEW = 1.5  # s


def quintic(tau: float) -> tuple[float, float]:
    """Smooth-step blend and its derivative on [0, 1]."""
    tau = min(max(tau, 0.0), 1.0)
    return (10 * tau ** 3 - 15 * tau ** 4 + 6 * tau ** 5,
            30 * tau ** 2 - 60 * tau ** 3 + 30 * tau ** 4)


@dataclass
class LaneChange:
    from_lane: int
    to_lane: int
    y0: float
    y1: float
    t0: float
    duration: float = LANE_CHANGE_S

    def reference(self, t: float) -> tuple[float, float]:
        """Lateral position and velocity of the spline at time ``t``."""
        b, db = quintic((t - self.t0) / self.duration)
        return self.y0 + (self.y1 - self.y0) * b, (self.y1 - self.y0) * db / self.duration

    def done(self, t: float) -> bool:
        return t - self.t0 >= self.duration - 1e-9


@dataclass
class Vehicle:
    vid: int
    s: float
    y: float
    v: float
    lane: int
    idm: IdmParams
    mobil: MobilParams
    a: float = 0.0
    psi: float = 0.0
    length: float = VEH_LENGTH
    width: float = VEH_WIDTH
    is_ego: bool = False
    lc: LaneChange | None = None
    next_decision: float = 0.0
    history: deque = field(default_factory=deque)

    def features(self) -> np.ndarray:
        return np.array([self.s, self.y, self.v, self.a, self.psi])


class World:
    """Deterministic microscopic traffic on the scenario road.

    Surrounding vehicles follow IDM and decide lane changes with MOBIL every
    ``DECISION_INTERVAL_S``; a decided change is executed as a quintic lateral
    spline.  The ego, when present, is advanced by the bicycle model from
    externally supplied controls and is seen by everyone else as an ordinary
    vehicle."""

    def __init__(self, scn: Scenario, with_ego: bool = True, history_len: int = 41,
                 ego_params: VehicleParams | None = None):
        self.scn = scn
        self.dt = scn.dt
        self.step_index = 0
        self.history_len = history_len
        self.vehicles: dict[int, Vehicle] = {}
        self.next_id = 1
        self.spawned = 0
        self.rng_spawn = seed_stream(scn.seed, "spawn")
        self.rng_traffic = seed_stream(scn.seed, "scenario")
        self.ego_params = ego_params or VehicleParams()
        self.ego: Vehicle | None = None
        self._next_arrival = [self._draw_interarrival() for _ in range(scn.lanes)]
        self._queued = [0] * scn.lanes
        if with_ego:
            idm, mobil = style_params("normal", v0=scn.v_des)
            self.ego = Vehicle(0, scn.ego_s0, scn.lane_center(scn.ego_lane), scn.ego_v0, scn.ego_lane,
                               idm, mobil, length=self.ego_params.length, width=self.ego_params.width,
                               is_ego=True)
            self.vehicles[0] = self.ego
        self._populate()
        for v in self.vehicles.values():
            self._push_history(v)

    # ------------------------------------------------------------------ setup
    @property
    def t(self) -> float:
        return self.step_index * self.dt

    def _draw_interarrival(self) -> float:
        q = self.scn.flow_per_lane
        return math.inf if q <= 0 else float(self.rng_spawn.exponential(1.0 / q))

    def _new_sv(self, s: float, lane: int, v: float | None = None) -> Vehicle:
        v0 = float(self.rng_traffic.uniform(22.0, 30.0))
        if self.scn.style == "aggressive":
            v0 *= 1.1
        idm, mobil = style_params(self.scn.style, v0=v0)
        veh = Vehicle(self.next_id, s, self.scn.lane_center(lane), v0 if v is None else v, lane, idm, mobil,
                      next_decision=float(self.rng_traffic.uniform(0.0, DECISION_INTERVAL_S)))
        self.next_id += 1
        return veh

    def _populate(self) -> None:
        """Fill the road at the equilibrium density of the demand level."""
        q = self.scn.flow_per_lane
        if q <= 0:
            return
        for lane in range(self.scn.lanes):
            s = self.scn.length - float(self.rng_spawn.uniform(0.0, 40.0))
            while s > 0.0:
                veh = self._new_sv(s, lane)
                veh.v = 0.9 * veh.idm.v0
                if not self._near_ego(veh):
                    self.vehicles[veh.vid] = veh
                    self.spawned += 1
                headway = max(float(self.rng_spawn.exponential(1.0 / q)), veh.idm.T + 0.5)
                s -= veh.v * headway + veh.length

    def _near_ego(self, veh: Vehicle, margin: float = 25.0) -> bool:
        e = self.ego
        return e is not None and veh.lane == e.lane and abs(veh.s - e.s) < margin

    def _spawn(self) -> None:
        for lane in range(self.scn.lanes):
            while self._next_arrival[lane] <= self.t + 1e-9:
                self._queued[lane] += 1
                self._next_arrival[lane] += self._draw_interarrival()
            if not self._queued[lane]:
                continue
            last = min((v for v in self.vehicles.values() if lane in self.occupied_lanes(v)),
                       key=lambda v: v.s, default=None)
            veh = self._new_sv(0.0, lane)
            if last is not None:
                veh.v = min(veh.v, last.v)
                gap = last.s - (last.length + veh.length) / 2.0
                if gap < veh.idm.s0 + veh.idm.T * veh.v:
                    self.next_id -= 1
                    continue
            self.vehicles[veh.vid] = veh
            self.spawned += 1
            self._queued[lane] -= 1
            self._push_history(veh)

    # ------------------------------------------------------------- geometry
    def occupied_lanes(self, veh: Vehicle) -> set[int]:
        """Lanes the footprint covers now or, for a freely steered vehicle,
        within ``LATERAL_PREVIEW`` seconds of its current lateral drift
        (other drivers react to a visibly drifting car)."""
        w = self.scn.lane_width
        drift = veh.v * math.sin(veh.psi) * LATERAL_PREVIEW if veh.lc is None else 0.0
        lo = int(math.floor((veh.y + min(drift, 0.0) - veh.width / 2.0) / w))
        hi = int(math.floor((veh.y + max(drift, 0.0) + veh.width / 2.0) / w))
        lanes = {i for i in range(lo, hi + 1) if 0 <= i < self.scn.lanes}
        if veh.lc is not None:
            lanes |= {veh.lc.from_lane, veh.lc.to_lane}
        return lanes or {self.scn.lane_of(veh.y)}

    def _lane_lists(self) -> list[list[Vehicle]]:
        lists = [[] for _ in range(self.scn.lanes)]
        for v in self.vehicles.values():
            for lane in self.occupied_lanes(v):
                lists[lane].append(v)
        for lst in lists:
            lst.sort(key=lambda v: (v.s, v.vid))
        return lists

    @staticmethod
    def _gap(rear: Vehicle, front: Vehicle) -> float:
        return front.s - rear.s - (front.length + rear.length) / 2.0

    def _neighbours(self, veh: Vehicle, lane_list: list[Vehicle]):
        lead = follow = None
        for other in lane_list:
            if other is veh:
                continue
            if other.s > veh.s or (other.s == veh.s and other.vid > veh.vid):
                if lead is None:
                    lead = other
            else:
                follow = other
        return lead, follow

    def leader(self, veh: Vehicle, lists: list[list[Vehicle]] | None = None) -> Vehicle | None:
        lists = lists if lists is not None else self._lane_lists()
        best = None
        for lane in self.occupied_lanes(veh):
            lead, _ = self._neighbours(veh, lists[lane])
            if lead is not None and (best is None or lead.s < best.s):
                best = lead
        return best

    def lane_context(self, veh: Vehicle, lane: int, lists: list[list[Vehicle]]) -> LaneContext:
        if not (0 <= lane < self.scn.lanes):
            return LaneContext(exists=False)
        lead, follow = self._neighbours(veh, lists[lane])
        return LaneContext(
            exists=True,
            lead_gap=None if lead is None else self._gap(veh, lead),
            lead_v=None if lead is None else lead.v,
            follow_gap=None if follow is None else self._gap(follow, veh),
            follow_v=None if follow is None else follow.v,
            follow_idm=None if follow is None else follow.idm,
        )

    def collisions(self) -> list[tuple[int, int]]:
        """Pairs of vehicles whose rectangular footprints overlap."""
        vs = sorted(self.vehicles.values(), key=lambda v: v.s)
        out = []
        for i, a in enumerate(vs):
            for b in vs[i + 1:]:
                if b.s - a.s >= (a.length + b.length) / 2.0:
                    break
                if abs(a.y - b.y) < (a.width + b.width) / 2.0:
                    out.append(tuple(sorted((a.vid, b.vid))))
        return out

    # --------------------------------------------------------------- stepping
    def idm_for(self, veh: Vehicle, lists) -> float:
        lead = self.leader(veh, lists)
        if lead is None:
            return idm_accel(veh.v, None, None, veh.idm)
        return idm_accel(veh.v, lead.v, self._gap(veh, lead), veh.idm)

    def _decide(self, veh: Vehicle, lists) -> None:
        cur = self.lane_context(veh, veh.lane, lists)
        left = self.lane_context(veh, veh.lane + 1, lists)
        right = self.lane_context(veh, veh.lane - 1, lists)
        choice = mobil_decide(veh.v, veh.length, cur, left, right, veh.idm, veh.mobil)
        if choice == "stay":
            return
        to = veh.lane + (1 if choice == "left" else -1)
        self.start_lane_change(veh, to, lists)

    def start_lane_change(self, veh: Vehicle, to_lane: int, lists=None) -> None:
        veh.lc = LaneChange(veh.lane, to_lane, veh.y, self.scn.lane_center(to_lane), self.t)
        if lists is not None:
            lists[to_lane].append(veh)
            lists[to_lane].sort(key=lambda v: (v.s, v.vid))

    def step(self, ego_control: tuple[float, float] | None = None) -> None:
        """Advance one ``dt``.  ``ego_control`` is (a, delta_f) for the ego."""
        dt = self.dt
        lists = self._lane_lists()
        accels = {}
        for veh in self.vehicles.values():
            if not veh.is_ego:
                accels[veh.vid] = self.idm_for(veh, lists)
        for veh in list(self.vehicles.values()):
            if veh.is_ego or veh.lc is not None or veh.next_decision > self.t + 1e-9:
                continue
            veh.next_decision += DECISION_INTERVAL_S
            self._decide(veh, lists)
        t_next = self.t + dt
        for veh in self.vehicles.values():
            if veh.is_ego:
                continue
            a = accels[veh.vid]
            if veh.v + a * dt < 0.0:
                ds = veh.v * veh.v / (2.0 * -a) if a < 0 else 0.0
                v_new = 0.0
            else:
                ds = veh.v * dt + 0.5 * a * dt * dt
                v_new = veh.v + a * dt
            veh.s += ds
            veh.a = a
            veh.v = v_new
            if veh.lc is not None:
                veh.y, vy = veh.lc.reference(t_next)
                veh.psi = math.atan2(vy, max(veh.v, 0.1))
                if veh.lc.done(t_next):
                    veh.lane, veh.lc, veh.psi = veh.lc.to_lane, None, 0.0
        if self.ego is not None:
            self._advance_ego(ego_control if ego_control is not None else (0.0, 0.0))
        self.step_index += 1
        for vid in [v.vid for v in self.vehicles.values() if not v.is_ego and v.s > self.scn.length]:
            del self.vehicles[vid]
        self._spawn()
        for v in self.vehicles.values():
            self._push_history(v)

    def _advance_ego(self, u: tuple[float, float]) -> None:
        e = self.ego
        p = self.ego_params
        x = np.array([e.s, e.v, e.y, e.psi])
        nx = rk4_step(x, np.asarray(u, dtype=float), p, self.dt)
        e.s, e.v, e.y, e.psi = float(nx[0]), max(float(nx[1]), 0.0), float(nx[2]), float(nx[3])
        e.a = float(u[0])
        e.lane = self.scn.lane_of(e.y)

    def _push_history(self, veh: Vehicle) -> None:
        veh.history.append(veh.features())
        while len(veh.history) > self.history_len:
            veh.history.popleft()

    # ------------------------------------------------------------ observation
    def snapshot(self) -> list[list[float]]:
        return [[v.vid, v.s, v.y, v.v, v.a, v.psi] for v in self.vehicles.values()]

    def select_slots(self, center: Vehicle) -> list[Vehicle | None]:
        """Nearest vehicles in the FV, RV, LFV, LRV, RFV, RRV positions."""
        others = [(v.vid, v.s, v.y) if v.lc is None else (v.vid, v.s, v.y, v.lc.to_lane)
                  for v in self.vehicles.values() if v is not center]
        ids = select_slots((center.vid, center.s, center.y), others, self.scn)
        return [None if i is None else self.vehicles[i] for i in ids]

    def lane_map(self, y: float) -> np.ndarray:
        return lane_map_for(self.scn, y)

    def observe(self, T_h: int, N: int, params: VehicleParams | None = None) -> Frame:
        """Frame centred on the ego built from the last ``T_h + 1`` samples.

        Short histories (fresh spawns) are extended backwards at constant speed.
        The future block is zero-filled; planning only needs the history."""
        ego = self.ego
        slots = [ego] + self.select_slots(ego)
        k = len(SLOTS)
        hist = np.zeros((k, T_h, VEH_FEATURES))
        maps = np.zeros((k, MAP_LANES) + lane_map_for(self.scn, 0.0).shape[1:])
        present = np.zeros(k, dtype=bool)
        for i, veh in enumerate(slots):
            if veh is None:
                continue
            present[i] = True
            hist[i] = padded_history(np.array(veh.history), T_h, self.dt)
            maps[i] = lane_map_for(self.scn, veh.y)
        params = params or VehicleParams()
        return Frame(frame_id=f"t{self.step_index}", dt=self.dt, history=hist,
                     future=np.zeros((k, N, VEH_FEATURES)), maps=maps, present=present,
                     params=tuple(params for _ in range(k)))


def select_slots(center: tuple[int, float, float], others, scn: Scenario,
                 radius: float = SLOT_RADIUS) -> list[int | None]:
    """Ids of the nearest vehicle in each surrounding slot.

    ``center`` and ``others`` are (id, s, y) tuples; lanes are taken from the
    lateral position unless an entry of ``others`` carries a fourth element,
    an explicit lane (used for vehicles already committed to a lane change).
    Left is the lane with the larger index."""
    cid, cs, cy = center
    out: list[int | None] = [None] * (len(SLOTS) - 1)
    dist = [math.inf] * len(out)
    lane = scn.lane_of(cy)
    for entry in others:
        vid, s, y = entry[:3]
        ds = s - cs
        if vid == cid or abs(ds) > radius:
            continue
        rel = (entry[3] if len(entry) > 3 else scn.lane_of(y)) - lane
        if rel not in (-1, 0, 1):
            continue
        ahead = ds > 0 or (ds == 0 and vid > cid)
        slot = {0: 0, 1: 2, -1: 4}[rel] + (0 if ahead else 1)
        if abs(ds) < dist[slot]:
            out[slot], dist[slot] = vid, abs(ds)
    return out


def padded_history(h: np.ndarray, T_h: int, dt: float) -> np.ndarray:
    """Last ``T_h`` rows of ``h``, back-extrapolated at constant speed if short."""
    if len(h) >= T_h:
        return h[-T_h:].copy()
    first = h[0]
    missing = T_h - len(h)
    back = np.repeat(first[None], missing, axis=0)
    back[:, 0] = first[0] - first[2] * dt * np.arange(missing, 0, -1)
    back[:, 3] = 0.0
    return np.vstack([back, h])


def lane_map_for(scn: Scenario, y: float) -> np.ndarray:
    """Current/left/right lane centrelines relative to lateral position ``y``."""
    from socialmpc.core import LaneMap

    lane = scn.lane_of(y)
    offs = []
    for l in (lane, lane + 1, lane - 1):
        offs.append(scn.lane_center(l) - y if 0 <= l < scn.lanes else None)
    return LaneMap.straight(offs).lanes
