"""Routing policies: admission, peer selection, centralized proxy scoring."""

from geokv.policy._types import (
    Decision,
    DecisionKind,
    Hop,
    PeerSummary,
    PolicyConfig,
    RegionState,
    Request,
    Strategy,
)
from geokv.policy.handler import handle_request, resolve_cost_params
from geokv.policy.selection import (
    local_has_capacity,
    route_central,
    score_candidates,
    score_central,
    select_peer_gorgo,
    select_peer_least_load,
    select_peer_prefix_trie,
)

__all__ = [
    "Decision",
    "DecisionKind",
    "Hop",
    "PeerSummary",
    "PolicyConfig",
    "RegionState",
    "Request",
    "Strategy",
    "handle_request",
    "local_has_capacity",
    "resolve_cost_params",
    "route_central",
    "score_candidates",
    "score_central",
    "select_peer_gorgo",
    "select_peer_least_load",
    "select_peer_prefix_trie",
]
