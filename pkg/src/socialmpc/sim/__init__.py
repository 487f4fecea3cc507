"""Closed-loop off-ramp traffic simulation."""

from socialmpc.sim.dataset import generate_dataset, record_traffic
from socialmpc.sim.episode import EpisodeLog, PasPlanner, pas_planner_step, run_episode
from socialmpc.sim.scenario import Scenario, load_scenario
from socialmpc.sim.traffic import IdmParams, LaneContext, MobilParams, idm_accel, mobil_decide
from socialmpc.sim.world import World

__all__ = [
    "EpisodeLog", "IdmParams", "LaneContext", "MobilParams", "PasPlanner", "Scenario", "World",
    "generate_dataset", "idm_accel", "load_scenario", "mobil_decide", "pas_planner_step",
    "record_traffic", "run_episode",
]
