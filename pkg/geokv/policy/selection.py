"""Peer selection strategies and the centralized proxy scorer."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from typing import Literal

from geokv._logger import logger
from geokv.cost import CostBreakdown, CostParams, estimate_cost, summary_age_ms
from geokv.errors import AllRegionsSaturatedError, NoPeerAvailableError
from geokv.policy._types import PeerSummary, PolicyConfig, RegionState, Request
from geokv.prefix_index import PrefixIndex


def local_has_capacity(state: RegionState, cfg: PolicyConfig) -> bool:
    """Running requests below threshold and KV cache below limit (both bounds exclusive)."""
    return state.running_requests < cfg.running_threshold and state.kv_cache_used_fraction < cfg.kv_cache_limit


def _load(peer: PeerSummary, load_metric: Literal["tokens", "requests"]) -> int:
    if load_metric == "requests":
        return peer.state.waiting_requests + peer.state.running_requests
    return peer.state.waiting_tokens + peer.state.running_tokens


def select_peer_least_load(
    peers: Sequence[PeerSummary], load_metric: Literal["tokens", "requests"] = "tokens"
) -> str:
    """Peer with the least pending work; ties go to lower RTT, then region id."""
    if not peers:
        raise NoPeerAvailableError("least-load selection over an empty peer set")
    return min(peers, key=lambda p: (_load(p, load_metric), p.rtt_ms, p.region_id)).region_id


def select_peer_prefix_trie(
    req: Request,
    peers: Sequence[PeerSummary],
    index: PrefixIndex,
    load_metric: Literal["tokens", "requests"] = "tokens",
) -> str:
    """Peer with the longest cached prefix of the prompt, ignoring network and load.

    Falls back to least-load when no peer holds any prefix of the prompt.
    """
    if not peers:
        raise NoPeerAvailableError("prefix-trie selection over an empty peer set")
    overlaps = {p.region_id: index.overlap_for_node(req.tokens, p.region_id) for p in peers}
    best = max(overlaps.values())
    if best == 0:
        logger.debug(f"Request {req.id}: no peer overlap, falling back to least-load")
        return select_peer_least_load(peers, load_metric)
    return min(region for region, overlap in overlaps.items() if overlap == best)


def _argmin(table: Sequence[CostBreakdown]) -> CostBreakdown:
    return min(table, key=lambda b: (b.total_ms, b.network_ms, b.region_id))


def score_candidates(
    req: Request,
    candidates: Sequence[PeerSummary],
    index: PrefixIndex,
    params: CostParams,
    *,
    local_region: str | None = None,
    now_us: int | None = None,
) -> list[CostBreakdown]:
    """Cost breakdown of every candidate that is not past the exclusion bound."""
    table: list[CostBreakdown] = []
    for candidate in candidates:
        if (
            params.exclude_after_ms is not None
            and now_us is not None
            and candidate.region_id != local_region
            and summary_age_ms(candidate, now_us) > params.exclude_after_ms
        ):
            logger.debug(f"Request {req.id}: excluding {candidate.region_id}, summary too old")
            continue
        overlap = index.overlap_for_node(req.tokens, candidate.region_id)
        table.append(
            estimate_cost(
                candidate,
                req.prompt_tokens,
                min(overlap, req.prompt_tokens),
                params,
                now_us=now_us,
                is_local=candidate.region_id == local_region,
            )
        )
    return table


def select_peer_gorgo(
    req: Request,
    local: RegionState | None,
    peers: Sequence[PeerSummary],
    index: PrefixIndex,
    cost_params: CostParams,
    *,
    now_us: int | None = None,
) -> tuple[str, tuple[CostBreakdown, ...]]:
    """Argmin of estimated TTFT over the peers and, when given, the local queue.

    The local candidate is scored without a network term. Ties go to the lower network term, then
    the smaller region id.

    Returns:
        The chosen region and the breakdown of every candidate scored.

    Raises:
        NoPeerAvailableError: No candidate survives the staleness exclusion.
    """
    candidates = list(peers)
    if local is not None:
        candidates.append(PeerSummary(region_id=local.region_id, rtt_ms=0.0, state=local, as_of_us=now_us or 0))
    table = score_candidates(
        req,
        candidates,
        index,
        cost_params,
        local_region=local.region_id if local is not None else None,
        now_us=now_us,
    )
    if not table:
        raise NoPeerAvailableError(f"request {req.id}: every candidate summary is past the exclusion bound")
    best = _argmin(table)
    return best.region_id, tuple(table)


def score_central(
    req: Request,
    all_states: Sequence[RegionState],
    global_index: PrefixIndex,
    rtt_from_proxy: Mapping[str, float],
    cost_params: CostParams,
    *,
    now_us: int | None = None,
) -> tuple[str, tuple[CostBreakdown, ...]]:
    """One-shot scoring of every region from the proxy's vantage point.

    Raises:
        NoPeerAvailableError: ``all_states`` is empty.
        AllRegionsSaturatedError: No region has queue room for the request.
    """
    if not all_states:
        raise NoPeerAvailableError("central routing over an empty region set")
    eligible = [s for s in all_states if s.queue_has_room(req.prompt_tokens)]
    if not eligible:
        raise AllRegionsSaturatedError(f"request {req.id}: every region queue is full")
    summaries = [
        PeerSummary(region_id=s.region_id, rtt_ms=rtt_from_proxy[s.region_id], state=s, as_of_us=now_us or 0)
        for s in eligible
    ]
    return select_peer_gorgo(req, None, summaries, global_index, cost_params, now_us=now_us)


def route_central(
    req: Request,
    all_states: Sequence[RegionState],
    global_index: PrefixIndex,
    rtt_from_proxy: Mapping[str, float],
    cost_params: CostParams,
    *,
    now_us: int | None = None,
) -> str:
    """Region a centralized proxy sends ``req`` to (see score_central)."""
    region, _ = score_central(req, all_states, global_index, rtt_from_proxy, cost_params, now_us=now_us)
    return region
