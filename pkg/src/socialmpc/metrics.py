"""Measures of effectiveness for prediction and closed-loop driving."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SAFETY_HEADWAY_S = 1.0
SPEED_BIN = 0.5


# --------------------------------------------------------------------------- #
# displacement errors

def _as_tracks(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=float)
    g = np.asarray(gt, dtype=float)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    if p.ndim == 2:
        p, g = p[None], g[None]
    if p.ndim != 3:
        raise ValueError("trajectories must be (T, D) or (V, T, D)")
    return p, g


def ade(pred, gt, upto: int | None = None) -> float:
    """Mean L2 distance over vehicles and the first ``upto`` future steps."""
    p, g = _as_tracks(pred, gt)
    upto = p.shape[1] if upto is None else int(upto)
    if upto < 1 or upto > p.shape[1]:
        raise ValueError(f"upto={upto} outside 1..{p.shape[1]}")
    return float(np.linalg.norm(p[:, :upto] - g[:, :upto], axis=-1).mean())


def fde(pred, gt) -> float:
    """Mean L2 distance of the final points."""
    p, g = _as_tracks(pred, gt)
    if p.shape[1] == 0:
        raise ValueError("empty trajectories")
    return float(np.linalg.norm(p[:, -1] - g[:, -1], axis=-1).mean())


# --------------------------------------------------------------------------- #
# interaction strength

def frobenius(mat) -> float:
    m = np.asarray(mat)
    return float(np.sqrt(np.sum(np.abs(m) ** 2)))


@dataclass
class InteractionStrength:
    per_step: np.ndarray     # (N, k, k)
    time_averaged: np.ndarray  # (k, k)


def interaction_strength(blocks, horizon: int | None = None) -> InteractionStrength:
    """Frobenius norm of every (row, col) block at every step and its time average.

    ``blocks`` is (N, k, k, r, c); ``horizon`` truncates to the first steps."""
    b = np.asarray(blocks, dtype=float)
    if horizon is not None:
        b = b[:horizon]
    per = np.sqrt(np.sum(b * b, axis=(-2, -1)))
    return InteractionStrength(per, per.mean(axis=0))


# --------------------------------------------------------------------------- #
# headway spectrum

@dataclass
class Spectrum:
    freqs: np.ndarray   # Hz
    power: np.ndarray   # one-sided power per bin
    n_fft: int


def _next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def headway_spectrum(headways, dt: float, window: bool = True) -> Spectrum:
    """One-sided power spectrum of a mean-removed headway series.

    The (Hann-windowed) series is zero-padded to the next power of two.  Power
    is normalised so that its sum equals the windowed series' energy."""
    x = np.asarray(headways, dtype=float).ravel()
    if x.size < 8:
        raise ValueError(f"headway series needs at least 8 samples, got {x.size}")
    x = x - x.mean()
    if window:
        x = x * np.hanning(x.size)
    n = _next_pow2(x.size)
    X = np.fft.rfft(x, n=n)
    power = np.abs(X) ** 2 / n
    power[1:n // 2] *= 2.0
    return Spectrum(np.fft.rfftfreq(n, dt), power, n)


# --------------------------------------------------------------------------- #
# closed-loop MOEs

@dataclass
class EvalReport:
    n_episodes: int
    success_pct: float
    failure_pct: float
    collision_pct: float
    offramp_duration: dict
    average_speed: float
    mean_unsafe_headway: float | None
    headway_spectrum: dict
    speed_histogram: dict
    lane_change_distances: list[float]
    ade: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, out_dir: str | Path, prefix: str = "eval") -> list[Path]:
        """One CSV per MOE family."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []

        def emit(name, header, rows):
            p = out / f"{prefix}_{name}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows(rows)
            paths.append(p)

        emit("outcomes", ["episodes", "success_pct", "failure_pct", "collision_pct", "average_speed",
                          "mean_unsafe_headway"],
             [[self.n_episodes, _fmt(self.success_pct), _fmt(self.failure_pct),
               _fmt(self.collision_pct), _fmt(self.average_speed), _fmt(self.mean_unsafe_headway)]])
        d = self.offramp_duration
        emit("offramp_duration", ["count", "mean", "std", "min", "max"],
             [[d["count"], _fmt(d["mean"]), _fmt(d["std"]), _fmt(d["min"]), _fmt(d["max"])]])
        h = self.speed_histogram
        emit("speed_histogram", ["bin_lo", "bin_hi", "count"],
             [[_fmt(lo), _fmt(lo + SPEED_BIN), c] for lo, c in zip(h["edges"][:-1], h["counts"])])
        s = self.headway_spectrum
        emit("headway_spectrum", ["freq_hz", "power"],
             [[_fmt(f), _fmt(p)] for f, p in zip(s.get("freqs", []), s.get("power", []))])
        emit("lane_change_distance", ["distance_m"], [[_fmt(x)] for x in self.lane_change_distances])
        return paths


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def episode_moes(logs: Sequence, cfg=None, headway_threshold: float = SAFETY_HEADWAY_S) -> EvalReport:
    """Aggregate outcome rates, speeds, headways and lane-change distances.

    ``logs`` are :class:`socialmpc.sim.EpisodeLog`-like objects exposing
    ``outcome``, ``dt``, ``ego_speeds``, ``headways``, ``lane_changes`` and
    ``duration``."""
    if not logs:
        raise ValueError("no episode logs")
    n = len(logs)
    counts = {"success": 0, "failure": 0, "collision": 0}
    for lg in logs:
        counts[lg.outcome] += 1
    durations = np.array([lg.duration for lg in logs if lg.outcome == "success"], dtype=float)
    speeds = np.concatenate([np.asarray(lg.ego_speeds, dtype=float) for lg in logs])
    hw = np.concatenate([np.asarray([h for h in lg.headways if h is not None], dtype=float)
                         for lg in logs])
    unsafe = hw[hw < headway_threshold]
    lo = np.floor(speeds.min() / SPEED_BIN) * SPEED_BIN
    hi = (np.floor(speeds.max() / SPEED_BIN) + 1) * SPEED_BIN
    edges = np.arange(lo, hi + SPEED_BIN / 2, SPEED_BIN)
    hist, _ = np.histogram(speeds, bins=edges)
    spec = {}
    series = [np.asarray([h for h in lg.headways if h is not None], dtype=float) for lg in logs]
    series = [s for s in series if s.size >= 8]
    if series:
        longest = max(series, key=len)
        sp = headway_spectrum(longest, logs[0].dt)
        spec = {"freqs": sp.freqs.tolist(), "power": sp.power.tolist()}
    lc = [float(abs(e["s_end"] - e["s_start"])) for lg in logs for e in lg.lane_changes
          if e.get("s_end") is not None]
    return EvalReport(
        n_episodes=n,
        success_pct=100.0 * counts["success"] / n,
        failure_pct=100.0 * counts["failure"] / n,
        collision_pct=100.0 * counts["collision"] / n,
        offramp_duration={
            "count": int(durations.size),
            "mean": float(durations.mean()) if durations.size else None,
            "std": float(durations.std()) if durations.size else None,
            "min": float(durations.min()) if durations.size else None,
            "max": float(durations.max()) if durations.size else None,
        },
        average_speed=float(speeds.mean()),
        mean_unsafe_headway=float(unsafe.mean()) if unsafe.size else None,
        headway_spectrum=spec,
        speed_histogram={"edges": edges.tolist(), "counts": hist.tolist()},
        lane_change_distances=lc,
    )
