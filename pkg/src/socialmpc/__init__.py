"""Socially-aware motion planning: coupled interaction dynamics, a learned
encoder-decoder for the coupling terms, and a QP-based MPC planner driven
inside a closed-loop traffic simulator."""

from socialmpc.core import (
    SLOTS,
    Config,
    ControlInput,
    Frame,
    SystemControl,
    SystemState,
    VehicleParams,
    VehicleState,
    load_frames,
    validate_config,
    write_frames,
)

__version__ = "0.1.0"

__all__ = [
    "SLOTS",
    "Config",
    "ControlInput",
    "Frame",
    "SystemControl",
    "SystemState",
    "VehicleParams",
    "VehicleState",
    "load_frames",
    "validate_config",
    "write_frames",
]
