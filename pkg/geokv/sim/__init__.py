from geokv.sim._types import EVENT_PRIORITY, EventKind, SimEvent
from geokv.sim.backend import Backend, BatchEntry
from geokv.sim.config import (
    BackendModel,
    NetworkModel,
    RegionConfig,
    SimConfig,
    SimPolicyConfig,
    TelemetryConfig,
    default_calibration,
    load_config,
)
from geokv.sim.engine import (
    Simulation,
    SweepResult,
    SweepStageResult,
    run,
    run_strategy,
    run_sweep,
    write_event_log,
)
from geokv.sim.gossip import LATENCY_EMA_ALPHA, GossipLayer, RegionSnapshot, ema_update
from geokv.sim.network import Network

__all__ = [
    "EVENT_PRIORITY",
    "LATENCY_EMA_ALPHA",
    "Backend",
    "BackendModel",
    "BatchEntry",
    "EventKind",
    "GossipLayer",
    "Network",
    "NetworkModel",
    "RegionConfig",
    "RegionSnapshot",
    "SimConfig",
    "SimEvent",
    "SimPolicyConfig",
    "Simulation",
    "SweepResult",
    "SweepStageResult",
    "TelemetryConfig",
    "default_calibration",
    "ema_update",
    "load_config",
    "run",
    "run_strategy",
    "run_sweep",
    "write_event_log",
]
