"""Per-request routing decision of a regional load balancer."""

from __future__ import annotations

from collections.abc import Sequence

from geokv._logger import logger
from geokv.cost import CostParams
from geokv.errors import NoPeerAvailableError
from geokv.policy._types import Decision, DecisionKind, PeerSummary, PolicyConfig, RegionState, Request, Strategy
from geokv.policy.selection import (
    local_has_capacity,
    select_peer_gorgo,
    select_peer_least_load,
    select_peer_prefix_trie,
)
from geokv.prefix_index import PrefixIndex


def resolve_cost_params(cfg: PolicyConfig, local: RegionState) -> CostParams:
    """Cost weights in effect at ``local``: t_p follows the measured rate unless pinned in config."""
    if cfg.calibrate_t_p:
        return cfg.cost.model_copy(update={"t_p": local.t_p_measured})
    return cfg.cost


def handle_request(
    req: Request,
    local: RegionState,
    peers: Sequence[PeerSummary],
    index: PrefixIndex,
    cfg: PolicyConfig,
    *,
    now_us: int | None = None,
) -> Decision:
    """Admit locally when possible, otherwise pick a peer under the configured strategy.

    Regions already on the request's hop trace are not forwarded to again. At the hop bound the
    request queues locally, or is rejected when the local queue is full.
    """
    if req.hop_count > cfg.max_hops:
        raise ValueError(f"request {req.id} arrived with hop_count {req.hop_count} > max_hops {cfg.max_hops}")

    region = local.region_id
    if local_has_capacity(local, cfg):
        return Decision(kind=DecisionKind.SERVE_LOCAL, region_id=region, strategy=cfg.strategy)

    candidates = [p for p in peers if p.region_id != region and p.region_id not in req.visited]
    room = local.queue_has_room(req.prompt_tokens)

    if req.hop_count < cfg.max_hops and candidates:
        match cfg.strategy:
            case Strategy.LEAST_LOAD:
                target = select_peer_least_load(candidates, cfg.load_metric)
                return Decision(kind=DecisionKind.FORWARD, region_id=region, target=target, strategy=cfg.strategy)
            case Strategy.PREFIX_TRIE:
                target = select_peer_prefix_trie(req, candidates, index, cfg.load_metric)
                return Decision(kind=DecisionKind.FORWARD, region_id=region, target=target, strategy=cfg.strategy)
            case Strategy.GORGO | Strategy.GORGO_PROXY:
                params = resolve_cost_params(cfg, local)
                try:
                    chosen, table = select_peer_gorgo(
                        req, local if room else None, candidates, index, params, now_us=now_us
                    )
                except NoPeerAvailableError:
                    logger.warning(f"Request {req.id} at {region}: all peer summaries excluded as stale")
                else:
                    cost = next(b.total_ms for b in table if b.region_id == chosen)
                    if chosen == region:
                        return Decision(
                            kind=DecisionKind.QUEUE_LOCAL,
                            region_id=region,
                            breakdown=table,
                            chosen_cost=cost,
                            strategy=cfg.strategy,
                            cause="cheapest",
                        )
                    return Decision(
                        kind=DecisionKind.FORWARD,
                        region_id=region,
                        target=chosen,
                        breakdown=table,
                        chosen_cost=cost,
                        strategy=cfg.strategy,
                    )

    if room:
        cause = "max_hops" if req.hop_count >= cfg.max_hops else "no_peers"
        return Decision(kind=DecisionKind.QUEUE_LOCAL, region_id=region, strategy=cfg.strategy, cause=cause)

    logger.warning(f"Rejecting request {req.id} at {region}: local queue full and no forward possible")
    return Decision(kind=DecisionKind.REJECT, region_id=region, strategy=cfg.strategy, cause="saturated")
