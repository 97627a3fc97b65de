from ._config import GeoKVSettings
from .errors import GeoKVError
from .policy import Decision, DecisionKind, PolicyConfig, Strategy, handle_request
from .prefix_index import PrefixIndex
from .sim import SimConfig, load_config, run, run_sweep
from .telemetry import RunReport, aggregate, compare_policies

__all__ = [
    "Decision",
    "DecisionKind",
    "GeoKVError",
    "GeoKVSettings",
    "PolicyConfig",
    "PrefixIndex",
    "RunReport",
    "SimConfig",
    "Strategy",
    "aggregate",
    "compare_policies",
    "handle_request",
    "load_config",
    "run",
    "run_sweep",
]
