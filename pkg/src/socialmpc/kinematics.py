"""Kinematic bicycle model, its small-angle linearization and Euler stepping.

State order is (s, v, y, psi); control order is (a, delta_f).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from socialmpc.core import ControlInput, VehicleParams, VehicleState


@dataclass(frozen=True, eq=False)
class LinearizedVehicle:
    A: np.ndarray  # 4x4
    B: np.ndarray  # 4x2
    v_lin: float


def slip_angle(delta_f: float, p: VehicleParams) -> float:
    return math.atan(p.l_r / (p.l_r + p.l_f) * math.tan(delta_f))


def bicycle_derivative(x: VehicleState | np.ndarray, u: ControlInput | np.ndarray,
                       p: VehicleParams) -> np.ndarray:
    """Continuous-time nonlinear bicycle model, returns d/dt of (s, v, y, psi)."""
    s, v, y, psi = x.as_array() if isinstance(x, VehicleState) else np.asarray(x, dtype=float)
    a, delta = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    if abs(delta) >= math.pi / 2:
        raise ValueError(f"steering angle {delta} outside the open interval (-pi/2, pi/2)")
    phi = slip_angle(delta, p)
    return np.array([
        v * math.cos(psi + phi),
        a,
        v * math.sin(psi + phi),
        v / p.l_r * math.sin(phi),
    ])


def rk4_step(x: np.ndarray, u: np.ndarray, p: VehicleParams, dt: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    k1 = bicycle_derivative(x, u, p)
    k2 = bicycle_derivative(x + 0.5 * dt * k1, u, p)
    k3 = bicycle_derivative(x + 0.5 * dt * k2, u, p)
    k4 = bicycle_derivative(x + dt * k3, u, p)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def linear_matrices(v_lin: float, wheelbase: float) -> tuple[np.ndarray, np.ndarray]:
    A = np.zeros((4, 4))
    A[0, 1] = 1.0
    A[2, 3] = v_lin
    B = np.zeros((4, 2))
    B[1, 0] = 1.0
    B[3, 1] = v_lin / wheelbase
    return A, B


def linearize(v_lin: float, p: VehicleParams) -> LinearizedVehicle:
    if v_lin < 0:
        raise ValueError("linearization speed must be non-negative")
    A, B = linear_matrices(float(v_lin), p.wheelbase)
    A.setflags(write=False)
    B.setflags(write=False)
    return LinearizedVehicle(A, B, float(v_lin))


def discrete_step(x: VehicleState | np.ndarray, u: ControlInput | np.ndarray,
                  lin: LinearizedVehicle, dt: float) -> VehicleState:
    """Forward-Euler step of the linearized model: (A dt + I) x + B dt u."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    xv = x.as_array() if isinstance(x, VehicleState) else np.asarray(x, dtype=float)
    uv = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    nxt = (lin.A * dt + np.eye(4)) @ xv + lin.B @ uv * dt
    return VehicleState.from_array(nxt)
