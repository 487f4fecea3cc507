"""Shared domain types, configuration and the frame file format."""

from __future__ import annotations

import dataclasses
import json
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

SLOTS: tuple[str, ...] = ("ego", "FV", "RV", "LFV", "LRV", "RFV", "RRV")
STATE_DIM = 4
CONTROL_DIM = 2
VEH_FEATURES = 5  # s, y, v, a, psi
MAP_LANES = 3
MAP_POINTS = 20
MAP_FEATURES = 4  # local x, local y, lane heading, exists flag
MAP_SPACING = 2.0


class SchemaError(ValueError):
    """A frame or config violates its declared structure."""


class FrameParseError(SchemaError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VehicleState:
    s: float
    v: float
    y: float
    psi: float

    def __post_init__(self):
        if self.v < 0:
            raise ValueError(f"speed must be non-negative, got {self.v}")
        if abs(self.psi) > math.pi / 2:
            raise ValueError(f"|psi| must be <= pi/2, got {self.psi}")

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.v, self.y, self.psi])

    @classmethod
    def from_array(cls, x: Sequence[float]) -> "VehicleState":
        return cls(float(x[0]), float(x[1]), float(x[2]), float(x[3]))


@dataclass(frozen=True)
class ControlInput:
    a: float
    delta_f: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.delta_f])

    def check(self, cfg: "Config") -> None:
        if not (cfg.a_min <= self.a <= cfg.a_max):
            raise ValueError(f"acceleration {self.a} outside [{cfg.a_min}, {cfg.a_max}]")
        if abs(self.delta_f) > cfg.delta_max:
            raise ValueError(f"|delta_f| {self.delta_f} exceeds {cfg.delta_max}")


@dataclass(frozen=True)
class VehicleParams:
    l_f: float = 1.2
    l_r: float = 1.6
    length: float = 4.8
    width: float = 1.8

    def __post_init__(self):
        if self.l_f <= 0 or self.l_r <= 0:
            raise ValueError("axle distances l_f and l_r must be positive")

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SystemState:
    """Ego plus ``n`` surrounding slots, stored as an ``(n+1, 4)`` array.

    Row 0 is the ego.  ``mask[i]`` is False for absent slots; their rows are
    carried along but never contribute to downstream numerics.
    """

    x: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        x = _frozen(self.x)
        mask = np.array(self.mask, dtype=bool)
        mask.setflags(write=False)
        if x.ndim != 2 or x.shape[1] != STATE_DIM:
            raise SchemaError(f"state array must be (n+1, 4), got {x.shape}")
        if mask.shape != (x.shape[0],):
            raise SchemaError(f"mask shape {mask.shape} does not match {x.shape[0]} slots")
        if not mask[0]:
            raise SchemaError("ego slot must be present")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "mask", mask)

    @property
    def n(self) -> int:
        return self.x.shape[0] - 1

    @property
    def ego(self) -> VehicleState:
        return VehicleState.from_array(self.x[0])

    @property
    def surr(self) -> list[VehicleState | None]:
        return [VehicleState.from_array(r) if m else None for r, m in zip(self.x[1:], self.mask[1:])]

    def flatten(self) -> np.ndarray:
        return self.x.reshape(-1).copy()

    @classmethod
    def from_flat(cls, vec: np.ndarray, mask: Sequence[bool]) -> "SystemState":
        vec = np.asarray(vec, dtype=float)
        return cls(vec.reshape(-1, STATE_DIM), np.asarray(mask, dtype=bool))

    @classmethod
    def from_states(cls, ego: VehicleState, surr: Sequence[VehicleState | None]) -> "SystemState":
        rows = [ego.as_array()]
        mask = [True]
        for st in surr:
            rows.append(st.as_array() if st is not None else np.zeros(STATE_DIM))
            mask.append(st is not None)
        return cls(np.array(rows), np.array(mask))

    def __eq__(self, other):
        if not isinstance(other, SystemState):
            return NotImplemented
        return np.array_equal(self.mask, other.mask) and np.array_equal(self.x, other.x)


@dataclass(frozen=True, eq=False)
class SystemControl:
    """Stacked controls ``(n+1, 2)``.  Ego instances carry zeros on surr rows,
    surr instances a zero ego row."""

    u: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        u = _frozen(self.u)
        mask = np.array(self.mask, dtype=bool)
        mask.setflags(write=False)
        if u.ndim != 2 or u.shape[1] != CONTROL_DIM or mask.shape != (u.shape[0],):
            raise SchemaError(f"control array must be (n+1, 2) with matching mask, got {u.shape}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def ego_only(cls, u_ego: Sequence[float], mask: Sequence[bool]) -> "SystemControl":
        mask = np.asarray(mask, dtype=bool)
        u = np.zeros((mask.size, CONTROL_DIM))
        u[0] = u_ego
        return cls(u, mask)

    @classmethod
    def surr_only(cls, u_surr: np.ndarray, mask: Sequence[bool]) -> "SystemControl":
        mask = np.asarray(mask, dtype=bool)
        u = np.zeros((mask.size, CONTROL_DIM))
        u[1:] = np.asarray(u_surr, dtype=float).reshape(-1, CONTROL_DIM)
        u[~mask] = 0.0
        return cls(u, mask)

    @property
    def is_ego_control(self) -> bool:
        return not np.any(self.u[1:])

    @property
    def is_surr_control(self) -> bool:
        return not np.any(self.u[0])

    def flatten(self) -> np.ndarray:
        return self.u.reshape(-1).copy()


@dataclass(frozen=True, eq=False)
class LaneMap:
    """Current, left and right lane polylines in the vehicle's local frame."""

    lanes: np.ndarray  # (3, L, 4)

    def __post_init__(self):
        lanes = _frozen(self.lanes)
        if lanes.ndim != 3 or lanes.shape[0] != MAP_LANES or lanes.shape[2] != MAP_FEATURES:
            raise SchemaError(f"lane map must be (3, L, {MAP_FEATURES}), got {lanes.shape}")
        for k in range(MAP_LANES):
            flags = lanes[k, :, 3]
            if np.any((flags != 0.0) & (flags != 1.0)):
                raise SchemaError("lane-exists flag must be 0 or 1")
            if np.all(flags == 0.0) and np.any(lanes[k, :, :3]):
                raise SchemaError("missing lane must carry zeroed geometry")
        object.__setattr__(self, "lanes", lanes)

    @classmethod
    def straight(cls, y_offsets: Sequence[float | None], n_points: int = MAP_POINTS,
                 spacing: float = MAP_SPACING) -> "LaneMap":
        """Straight lanes at the given lateral offsets (None = lane missing)."""
        lanes = np.zeros((MAP_LANES, n_points, MAP_FEATURES))
        xs = np.arange(n_points) * spacing
        for k, off in enumerate(y_offsets):
            if off is None:
                continue
            lanes[k, :, 0] = xs
            lanes[k, :, 1] = off
            lanes[k, :, 3] = 1.0
        return cls(lanes)


@dataclass(frozen=True, eq=False)
class Frame:
    """One sample: ``history`` (n+1, T_h, 5), ``future`` (n+1, N, 5), lane maps
    (n+1, 3, L, 4) and per-slot presence.  Feature order is (s, y, v, a, psi)."""

    frame_id: str
    dt: float
    history: np.ndarray
    future: np.ndarray
    maps: np.ndarray
    present: np.ndarray
    params: tuple[VehicleParams, ...]

    def __post_init__(self):
        hist = _frozen(self.history)
        fut = _frozen(self.future)
        maps = _frozen(self.maps)
        present = np.array(self.present, dtype=bool)
        present.setflags(write=False)
        k = len(SLOTS)
        if self.dt <= 0:
            raise SchemaError("dt must be positive")
        if hist.ndim != 3 or hist.shape[0] != k or hist.shape[2] != VEH_FEATURES:
            raise SchemaError(f"history must be ({k}, T_h, {VEH_FEATURES}), got {hist.shape}")
        if fut.ndim != 3 or fut.shape[0] != k or fut.shape[2] != VEH_FEATURES:
            raise SchemaError(f"future must be ({k}, N, {VEH_FEATURES}), got {fut.shape}")
        if maps.ndim != 4 or maps.shape[:2] != (k, MAP_LANES) or maps.shape[3] != MAP_FEATURES:
            raise SchemaError(f"maps must be ({k}, 3, L, {MAP_FEATURES}), got {maps.shape}")
        if present.shape != (k,) or not present[0]:
            raise SchemaError("presence mask must cover every slot and include the ego")
        if len(self.params) != k:
            raise SchemaError("one VehicleParams per slot required")
        for name, arr in (("history", hist), ("future", fut), ("maps", maps)):
            if np.any(arr[~present]):
                raise SchemaError(f"absent slots must not carry {name} data")
            if not np.all(np.isfinite(arr)):
                raise SchemaError(f"non-finite value in {name}")
        object.__setattr__(self, "history", hist)
        object.__setattr__(self, "future", fut)
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "present", present)
        object.__setattr__(self, "params", tuple(self.params))

    @property
    def T_h(self) -> int:
        return self.history.shape[1]

    @property
    def N(self) -> int:
        return self.future.shape[1]

    def current_state(self) -> SystemState:
        last = self.history[:, -1]
        return SystemState(_feat_to_state(last), self.present)

    def previous_state(self) -> SystemState:
        prev = self.history[:, -2]
        return SystemState(_feat_to_state(prev), self.present)

    def future_states(self) -> np.ndarray:
        """Ground-truth stacked states, shape (N, n+1, 4)."""
        return _feat_to_state(self.future.transpose(1, 0, 2))


def _feat_to_state(feat: np.ndarray) -> np.ndarray:
    """(…, 5) features (s, y, v, a, psi) → (…, 4) states (s, v, y, psi)."""
    return np.stack([feat[..., 0], feat[..., 2], feat[..., 1], feat[..., 4]], axis=-1)


def state_to_feat(x: np.ndarray, a: np.ndarray | float = 0.0) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    a = np.broadcast_to(np.asarray(a, dtype=float), x.shape[:-1])
    return np.stack([x[..., 0], x[..., 2], x[..., 1], a, x[..., 3]], axis=-1)


# --------------------------------------------------------------------------- #
# Frame JSON-Lines I/O

def frame_to_record(frame: Frame) -> dict[str, Any]:
    vehicles = []
    for i, slot in enumerate(SLOTS):
        if not frame.present[i]:
            vehicles.append({"slot": slot, "present": False, "params": None,
                             "history": [], "future": [], "map": None})
            continue
        p = frame.params[i]
        lanes = frame.maps[i]
        vehicles.append({
            "slot": slot,
            "present": True,
            "params": {"l_f": p.l_f, "l_r": p.l_r, "length": p.length, "width": p.width},
            "history": frame.history[i].tolist(),
            "future": frame.future[i].tolist(),
            "map": {"current": lanes[0].tolist(), "left": lanes[1].tolist(),
                    "right": lanes[2].tolist()},
        })
    return {"frame_id": frame.frame_id, "dt": frame.dt, "vehicles": vehicles}


def frame_from_record(rec: Mapping[str, Any]) -> Frame:
    vehicles = rec["vehicles"]
    by_slot = {v["slot"]: v for v in vehicles}
    if set(by_slot) != set(SLOTS) or len(vehicles) != len(SLOTS):
        raise SchemaError(f"vehicles must cover slots {SLOTS} exactly once")
    present_recs = [by_slot[s] for s in SLOTS if by_slot[s]["present"]]
    if not present_recs:
        raise SchemaError("ego must be present")
    t_h = len(present_recs[0]["history"])
    n_f = len(present_recs[0]["future"])
    n_l = len(present_recs[0]["map"]["current"])
    k = len(SLOTS)
    hist = np.zeros((k, t_h, VEH_FEATURES))
    fut = np.zeros((k, n_f, VEH_FEATURES))
    maps = np.zeros((k, MAP_LANES, n_l, MAP_FEATURES))
    present = np.zeros(k, dtype=bool)
    params = []
    for i, slot in enumerate(SLOTS):
        v = by_slot[slot]
        if not v["present"]:
            params.append(VehicleParams())
            continue
        present[i] = True
        h = np.asarray(v["history"], dtype=float)
        f = np.asarray(v["future"], dtype=float)
        if h.shape != (t_h, VEH_FEATURES):
            raise SchemaError(f"slot {slot}: history shape {h.shape}, expected ({t_h}, {VEH_FEATURES})")
        if f.shape != (n_f, VEH_FEATURES):
            raise SchemaError(f"slot {slot}: future shape {f.shape}, expected ({n_f}, {VEH_FEATURES})")
        hist[i], fut[i] = h, f
        for j, lane in enumerate(("current", "left", "right")):
            m = np.asarray(v["map"][lane], dtype=float)
            if m.shape != (n_l, MAP_FEATURES):
                raise SchemaError(f"slot {slot}: {lane} lane shape {m.shape}")
            maps[i, j] = m
        params.append(VehicleParams(**v["params"]))
    return Frame(str(rec["frame_id"]), float(rec["dt"]), hist, fut, maps, present, tuple(params))


def dump_frame(frame: Frame) -> str:
    return json.dumps(frame_to_record(frame), separators=(",", ":"))


def write_frames(path: str | Path, frames: Iterable[Frame]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for fr in frames:
            fh.write(dump_frame(fr))
            fh.write("\n")
            count += 1
    return count


def load_frames(path: str | Path, T_h: int | None = None, N: int | None = None) -> list[Frame]:
    """Load a JSON-Lines frame file, validating every record.

    ``T_h``/``N`` pin the expected lengths; otherwise the first frame sets them
    and every later frame must agree.
    """
    frames: list[Frame] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FrameParseError(lineno, f"malformed JSON ({exc.msg})") from None
            try:
                fr = frame_from_record(rec)
            except (KeyError, TypeError) as exc:
                raise FrameParseError(lineno, f"missing or mistyped field {exc}") from None
            except SchemaError as exc:
                raise FrameParseError(lineno, str(exc)) from None
            want_th = T_h if T_h is not None else (frames[0].T_h if frames else fr.T_h)
            want_n = N if N is not None else (frames[0].N if frames else fr.N)
            if fr.T_h != want_th or fr.N != want_n:
                raise FrameParseError(
                    lineno, f"inconsistent horizons: T_h={fr.T_h}, N={fr.N}; expected T_h={want_th}, N={want_n}")
            frames.append(fr)
    return frames


# --------------------------------------------------------------------------- #
# Configuration

@dataclass(frozen=True)
class Config:
    dt: float = 0.1
    N: int = 50
    T_h: int = 40
    n: int = 6
    # cost weights: s, v, a, y, psi, delta_f
    theta_1: float = 0.0
    theta_2: float = 1.0
    theta_3: float = 1.0
    theta_4: float = 0.6
    theta_5: float = 20.0
    theta_6: float = 20.0
    lambda_1: float = 1.0
    lambda_2: float = 1.0
    big_m: float = 1e4
    s_ref: float = 10.0
    y_ref: float = 2.0
    v_min: float = 0.0
    v_max: float = 35.0
    a_min: float = -6.0
    a_max: float = 4.0
    psi_max: float = 0.3
    delta_max: float = 0.5
    v_floor: float = 1.0
    a_lat_max: float = 3.0  # lateral acceleration cap on the planned steering
    # model
    d_model: int = 32
    n_heads: int = 4
    enc_depth: int = 1
    dec_depth: int = 1
    k_modes: int = 6
    block_bound: float = 2.0
    gmm_data_term: bool = True
    # training
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 25
    # solver / planner
    qp_tol: float = 1e-6
    qp_max_iter: int = 20000
    relinearize_passes: int = 1
    seed: int = 0

    def theta(self) -> tuple[float, ...]:
        return (self.theta_1, self.theta_2, self.theta_3, self.theta_4, self.theta_5, self.theta_6)

    def replace(self, **kw) -> "Config":
        return validate_config(dataclasses.replace(self, **kw))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_INT_FIELDS = {f.name for f in dataclasses.fields(Config) if f.type in ("int", int)}
_BOOL_FIELDS = {f.name for f in dataclasses.fields(Config) if f.type in ("bool", bool)}


def validate_config(cfg: Config | Mapping[str, Any] | None = None) -> Config:
    """Return a normalized Config, filling defaults for absent keys."""
    if cfg is None:
        cfg = Config()
    elif isinstance(cfg, Mapping):
        known = {f.name for f in dataclasses.fields(Config)}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        vals = {}
        for k, v in cfg.items():
            if k in _BOOL_FIELDS:
                vals[k] = bool(v)
            elif k in _INT_FIELDS:
                if float(v) != int(v):
                    raise ConfigError(f"{k} must be an integer")
                vals[k] = int(v)
            else:
                vals[k] = float(v)
        cfg = Config(**vals)
    if not cfg.dt > 0:
        raise ConfigError("dt must be positive")
    if cfg.N <= 0:
        raise ConfigError("N must be positive")
    if cfg.T_h < 2:
        raise ConfigError("T_h must be at least 2")
    if cfg.n < 0:
        raise ConfigError("n must be non-negative")
    weights = cfg.theta() + (cfg.lambda_1, cfg.lambda_2)
    if any(w < 0 for w in weights):
        raise ConfigError("all weights must be non-negative")
    if cfg.s_ref <= 0 or cfg.y_ref <= 0:
        raise ConfigError("s_ref and y_ref must be positive")
    if cfg.big_m <= cfg.s_ref or cfg.big_m <= cfg.y_ref:
        raise ConfigError("big_m must exceed s_ref and y_ref")
    if not (cfg.v_min <= cfg.v_max and cfg.a_min <= 0 <= cfg.a_max):
        raise ConfigError("inconsistent speed/acceleration bounds")
    if cfg.psi_max <= 0 or cfg.delta_max <= 0 or cfg.delta_max >= math.pi / 2:
        raise ConfigError("heading/steering bounds must be positive (steering < pi/2)")
    if not cfg.a_lat_max > 0:
        raise ConfigError("a_lat_max must be positive")
    if cfg.d_model % cfg.n_heads:
        raise ConfigError("d_model must be divisible by n_heads")
    if cfg.k_modes < 1 or cfg.block_bound <= 0:
        raise ConfigError("k_modes >= 1 and block_bound > 0 required")
    if cfg.qp_tol <= 0 or cfg.qp_max_iter <= 0:
        raise ConfigError("solver tolerance and iteration cap must be positive")
    return cfg


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return validate_config()
    import tomli

    with open(path, "rb") as fh:
        data = tomli.load(fh)
    return validate_config(data)


def dump_config(cfg: Config) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, bool):
            lines.append(f"{k} = {'true' if v else 'false'}")
        else:
            lines.append(f"{k} = {v!r}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- #
# Seeds

def seed_stream(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named subsystem derived from one root seed."""
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(zlib.crc32(name.encode()),))
    return np.random.default_rng(ss)


def default_params(n: int = len(SLOTS) - 1) -> tuple[VehicleParams, ...]:
    return tuple(VehicleParams() for _ in range(n + 1))


__all__ = [
    "SLOTS", "STATE_DIM", "CONTROL_DIM", "VEH_FEATURES", "SchemaError", "FrameParseError",
    "ConfigError", "VehicleState", "ControlInput", "VehicleParams", "SystemState",
    "SystemControl", "LaneMap", "Frame", "Config", "validate_config", "load_config",
    "dump_config", "load_frames", "write_frames", "dump_frame", "frame_to_record",
    "frame_from_record", "seed_stream", "state_to_feat", "default_params",
]

