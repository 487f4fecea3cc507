import numpy as np
import pytest

from socialmpc.core import SLOTS, Config, Frame, LaneMap, VehicleParams


def make_frame(frame_id="f0", T_h=4, N=3, present=None, seed=0, dt=0.1):
    """Small synthetic frame with straight constant-speed tracks."""
    rng = np.random.default_rng(seed)
    k = len(SLOTS)
    present = np.ones(k, bool) if present is None else np.asarray(present, bool)
    hist = np.zeros((k, T_h, 5))
    fut = np.zeros((k, N, 5))
    maps = np.zeros((k, 3, 20, 4))
    for i in range(k):
        if not present[i]:
            continue
        s0, y0, v = rng.uniform(-30, 30), 1.75 + 3.5 * rng.integers(0, 3), rng.uniform(15, 30)
        t = np.arange(-T_h + 1, N + 1) * dt
        track = np.stack([s0 + v * t, np.full_like(t, y0), np.full_like(t, v), np.zeros_like(t),
                          np.zeros_like(t)], axis=-1)
        hist[i], fut[i] = track[:T_h], track[T_h:]
        maps[i] = LaneMap.straight([0.0, 3.5, -3.5]).lanes
    return Frame(frame_id, dt, hist, fut, maps, present, tuple(VehicleParams() for _ in range(k)))


@pytest.fixture
def cfg():
    return Config()


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, when that module ran."""
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
