"""Energy-harvesting multi-hop IoT network simulator and trainer."""

__version__ = "0.1.0"

from .topology import (Topology, RateModel, build_topology, transmission_rate,
                       transmission_time, fifteen_node_fixture, load_topology)
from .energy import (PowerProfile, HarvestTrace, EnergyState, advance_energy,
                     harvest_power_at, generate_synthetic_trace)
from .simulation import (World, SimParams, Packet, TransmitQueue, Observation,
                         AgentAction, InvalidActionError, OBS_DIM, N_SLOTS)
from .rewards import RewardConfig, RewardLedger, local_reward, spatial_reward
from .events import StepEvent

__all__ = [
    "Topology", "RateModel", "build_topology", "transmission_rate",
    "transmission_time", "fifteen_node_fixture", "load_topology",
    "PowerProfile", "HarvestTrace", "EnergyState", "advance_energy",
    "harvest_power_at", "generate_synthetic_trace",
    "World", "SimParams", "Packet", "TransmitQueue", "Observation",
    "AgentAction", "InvalidActionError", "OBS_DIM", "N_SLOTS",
    "RewardConfig", "RewardLedger", "local_reward", "spatial_reward",
    "StepEvent",
]
