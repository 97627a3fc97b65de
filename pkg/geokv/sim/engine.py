"""Deterministic discrete-event loop driving requests from ingress to completion."""

from __future__ import annotations

import functools
import heapq
import itertools
from collections.abc import Callable, Sequence
from pathlib import Path

from pydantic import BaseModel

from geokv._logger import logger, sim_clock
from geokv.errors import AllRegionsSaturatedError, ConfigError
from geokv.geo import nearest_region
from geokv.policy import DecisionKind, Request, Strategy, handle_request, resolve_cost_params, score_central
from geokv.prefix_index import PrefixIndex
from geokv.sim._types import EVENT_PRIORITY, EventKind, SimEvent
from geokv.sim.backend import Backend
from geokv.sim.config import RegionConfig, SimConfig
from geokv.sim.gossip import GossipLayer
from geokv.sim.network import Network
from geokv.telemetry import RegionAggregate, RequestTrace, RunReport, build_report
from geokv.workload import Arrival, ArrivalStream, ScheduledStream, SweepShape, build_stream, gen_sweep

_HeapItem = tuple[int, int, int, int, int, EventKind, str | None]


class _Region:
    """A region's load balancer, its backend and the LB's own bookkeeping."""

    def __init__(self, cfg: RegionConfig, block_size: int, mirror_capacity: int, backend: Backend) -> None:
        self.id = cfg.id
        self.location = cfg.location
        self.backend = backend
        self.mirror = PrefixIndex(block_size, mirror_capacity)
        self.served: list[tuple[int, ...]] = []
        self.evicted: list[tuple[int, ...]] = []
        self.stats = RegionAggregate()


class Simulation:
    """One isolated run. Single-threaded; (config, seed) fully determine the event log."""

    def __init__(self, config: SimConfig, stream: ArrivalStream | None = None) -> None:
        self.config = config
        self.policy = config.routing_policy
        self.horizon_us = round(config.duration_s * 1e6)
        self.network = Network(config.network, config.network_seed)
        self.stream: ArrivalStream = stream if stream is not None else ScheduledStream([])
        self.now = 0
        self._kind = EventKind.GOSSIP_REFRESH
        self.events: list[SimEvent] = []
        self.traces: dict[int, RequestTrace] = {}

        self._heap: list[_HeapItem] = []
        self._seq = itertools.count()
        self._order = {rid: i for i, rid in enumerate(sorted(config.region_ids))}
        self.regions: dict[str, _Region] = {
            r.id: _Region(
                r,
                config.policy.block_size,
                config.policy.mirror_capacity_blocks,
                Backend(
                    r.id,
                    r.backend,
                    config.policy.block_size,
                    self.schedule,
                    on_evict=functools.partial(self._on_cache_evict, r.id),
                ),
            )
            for r in config.regions
        }
        self._locations = [(r.id, r.location) for r in config.regions]
        self.gossip = GossipLayer(config.region_ids, self.network, config.gossip_interval_ms)

        self._requests: dict[int, Request] = {}
        self._pending: dict[int, Arrival] = {}
        self._next_id = 0
        self._active = 0

        self.proxy_mode = config.policy.strategy == Strategy.GORGO_PROXY
        self.proxy_region = config.proxy_region
        self.global_index = PrefixIndex(config.policy.block_size, config.policy.mirror_capacity_blocks)
        self._proxy_inflight: dict[str, list[Request]] = {rid: [] for rid in config.region_ids}

        self._handlers: dict[EventKind, Callable[[str | None, int], None]] = {
            EventKind.ARRIVAL: self._on_arrival,
            EventKind.HOP_DELIVERY: self._on_hop_delivery,
            EventKind.ADMIT_TO_BATCH: self._on_admit,
            EventKind.PREFILL_DONE: self._on_prefill_done,
            EventKind.DECODE_TICK: self._on_decode_tick,
            EventKind.REQUEST_DONE: self._on_request_done,
            EventKind.GOSSIP_REFRESH: self._on_gossip,
            EventKind.PROXY_RETRY: self._on_proxy_retry,
        }

    # Scheduling
    def schedule(self, at_us: int, kind: EventKind, region: str | None, request_id: int | None) -> None:
        if at_us < self.now:
            raise RuntimeError(f"cannot schedule {kind.value} at {at_us} before now={self.now}")
        rid = -1 if request_id is None else request_id
        ridx = -1 if region is None else self._order[region]
        heapq.heappush(self._heap, (at_us, EVENT_PRIORITY[kind], rid, ridx, next(self._seq), kind, region))

    def _log(
        self,
        kind: EventKind,
        region: str | None,
        request_id: int | None = None,
        target: str | None = None,
        info: str | None = None,
    ) -> None:
        if self.config.telemetry.event_log:
            self.events.append(
                SimEvent(at_us=self.now, kind=kind, region=region, request_id=request_id, target=target, info=info)
            )

    def inject(self, arrival: Arrival) -> int:
        request_id = self._next_id
        self._next_id += 1
        self._pending[request_id] = arrival
        self._active += 1
        self.schedule(max(arrival.at_us, self.now), EventKind.ARRIVAL, None, request_id)
        return request_id

    # Loop
    def run(self) -> tuple[list[SimEvent], RunReport]:
        with sim_clock(lambda: self.now):
            return self._run()

    def _run(self) -> tuple[list[SimEvent], RunReport]:
        logger.info(
            f"Simulating {len(self.regions)} regions for {self.config.duration_s}s "
            f"with {self.policy.strategy.value} (seed {self.config.seed})"
        )
        for arrival in sorted(self.stream.initial(), key=lambda a: a.at_us):
            self.inject(arrival)
        self.schedule(0, EventKind.GOSSIP_REFRESH, None, None)

        while self._heap:
            at_us, _, rid, _, _, kind, region = heapq.heappop(self._heap)
            if at_us > self.horizon_us and not self.config.drain:
                break
            self.now = at_us
            self._kind = kind
            self._handlers[kind](region, rid)

        in_flight = sum(not t.terminal for t in self.traces.values())
        logger.info(f"Simulation finished at {self.now / 1e6:.3f}s: {len(self.traces)} requests, {in_flight} in flight")
        return self.events, self.report()

    def report(self) -> RunReport:
        return build_report(
            [self.traces[i] for i in sorted(self.traces)],
            policy=self.policy.strategy.value,
            config_digest=self.config.digest(),
            seed=self.config.seed,
            duration_s=self.config.duration_s,
            regions={rid: self.regions[rid].stats for rid in self.config.region_ids},
            ddof=self.config.telemetry.ddof,
        )

    # Request lifecycle
    def _retire(self) -> None:
        self._active -= 1
        follow_up = self.stream.on_complete(self.now)
        if follow_up is not None:
            self.inject(follow_up)

    def _reject(self, trace: RequestTrace, cause: str) -> None:
        trace.mark_rejected(self.now, cause)
        trace.finalize()
        self._retire()

    def _on_arrival(self, _: str | None, request_id: int) -> None:
        arrival = self._pending.pop(request_id)
        prompt = arrival.prompt
        request = Request(
            id=request_id,
            tokens=prompt.tokens,
            origin=prompt.origin,
            created_at_us=self.now,
            output_tokens=arrival.output_tokens,
        )
        trace = RequestTrace(
            request_id=request_id,
            created_at_us=self.now,
            prompt_tokens=request.prompt_tokens,
            output_tokens=arrival.output_tokens,
            fallback_origin=prompt.fallback,
        )
        self._requests[request_id] = request
        self.traces[request_id] = trace

        ingress = self.proxy_region if self.proxy_mode else nearest_region(prompt.origin, self._locations)
        request.add_hop(ingress, self.now)
        trace.record_hop(ingress, self.now)
        if self.proxy_mode:
            self._route_via_proxy(request, trace, EventKind.ARRIVAL)
        else:
            self._decide(self.regions[ingress], request, trace, EventKind.ARRIVAL)

    def _on_hop_delivery(self, region_id: str | None, request_id: int) -> None:
        assert region_id is not None  # noqa: S101
        request = self._requests[request_id]
        trace = self.traces[request_id]
        region = self.regions[region_id]
        request.add_hop(region_id, self.now, self.policy.max_hops)
        trace.record_hop(region_id, self.now)
        if not self.proxy_mode:
            self._decide(region, request, trace, EventKind.HOP_DELIVERY)
            return

        inflight = self._proxy_inflight[region_id]
        inflight[:] = [r for r in inflight if r.id != request.id]
        region.stats.handled += 1
        trace.record_decision(DecisionKind.SERVE_LOCAL, self.now)
        self._log(EventKind.HOP_DELIVERY, region_id, request_id, info=DecisionKind.SERVE_LOCAL.value)
        self._serve(region, request, trace, trace.estimated_overlap_tokens, update_mirror=False)

    def _decide(self, region: _Region, request: Request, trace: RequestTrace, kind: EventKind) -> None:
        decision = handle_request(
            request,
            region.backend.state(self.now),
            self.gossip.peer_summaries(region.id),
            region.mirror,
            self.policy,
            now_us=self.now,
        )
        trace.record_decision(decision.kind, self.now, decision.breakdown)
        region.stats.handled += 1
        info = decision.kind.value if decision.cause is None else f"{decision.kind.value}:{decision.cause}"
        self._log(kind, region.id, request.id, target=decision.target, info=info)
        logger.debug(f"t={self.now}us request {request.id} at {region.id}: {info} {decision.target or ''}")

        match decision.kind:
            case DecisionKind.SERVE_LOCAL | DecisionKind.QUEUE_LOCAL:
                estimated = region.mirror.overlap_for_node(request.tokens, region.id)
                self._serve(region, request, trace, estimated, update_mirror=True)
            case DecisionKind.FORWARD:
                assert decision.target is not None  # noqa: S101
                region.stats.forwarded += 1
                at_us = self.network.deliver(request.id, request.hop_count, region.id, decision.target, self.now)
                self.schedule(at_us, EventKind.HOP_DELIVERY, decision.target, request.id)
            case DecisionKind.REJECT:
                region.stats.rejected += 1
                self._reject(trace, decision.cause or "saturated")

    def _serve(
        self,
        region: _Region,
        request: Request,
        trace: RequestTrace,
        estimated_overlap: int | None,
        *,
        update_mirror: bool,
    ) -> None:
        trace.served_region = region.id
        trace.estimated_overlap_tokens = estimated_overlap
        if not region.backend.admit(request, self.now):
            region.stats.rejected += 1
            self._log(self._kind, region.id, request.id, info=f"{DecisionKind.REJECT.value}:queue_full")
            self._reject(trace, "queue_full")
            return
        region.stats.served += 1
        if update_mirror:
            region.mirror.insert(request.tokens, region.id, self.now)
            region.served.append(request.tokens)

    # Centralized proxy
    def _route_via_proxy(self, request: Request, trace: RequestTrace, kind: EventKind) -> None:
        proxy = self.regions[self.proxy_region]
        states = [self.regions[rid].backend.state(self.now, self._proxy_inflight[rid]) for rid in sorted(self.regions)]
        rtts = {rid: self.network.latency_ms(self.proxy_region, rid) for rid in self.regions}
        params = resolve_cost_params(self.policy, proxy.backend.state(self.now))
        try:
            target, table = score_central(request, states, self.global_index, rtts, params, now_us=self.now)
        except AllRegionsSaturatedError:
            retry_us = max(round(self.policy.proxy_retry_ms * 1000), 1)
            logger.warning(f"All regions saturated, proxy retries request {request.id} in {retry_us}us")
            self._log(kind, proxy.id, request.id, info="retry:saturated")
            self.schedule(self.now + retry_us, EventKind.PROXY_RETRY, proxy.id, request.id)
            return

        estimated = self.global_index.overlap_for_node(request.tokens, target)
        self.global_index.insert(request.tokens, target, self.now)
        proxy.stats.handled += 1
        if target == proxy.id:
            trace.record_decision(DecisionKind.SERVE_LOCAL, self.now, table)
            self._log(kind, proxy.id, request.id, info=DecisionKind.SERVE_LOCAL.value)
            self._serve(proxy, request, trace, estimated, update_mirror=False)
            return

        trace.record_decision(DecisionKind.FORWARD, self.now, table)
        trace.estimated_overlap_tokens = estimated
        self._log(kind, proxy.id, request.id, target=target, info=DecisionKind.FORWARD.value)
        proxy.stats.forwarded += 1
        self._proxy_inflight[target].append(request)
        at_us = self.network.deliver(request.id, request.hop_count, proxy.id, target, self.now)
        self.schedule(at_us, EventKind.HOP_DELIVERY, target, request.id)

    def _on_proxy_retry(self, _: str | None, request_id: int) -> None:
        self._route_via_proxy(self._requests[request_id], self.traces[request_id], EventKind.PROXY_RETRY)

    # Backend events
    def _on_admit(self, region_id: str | None, request_id: int) -> None:
        assert region_id is not None  # noqa: S101
        entry = self.regions[region_id].backend.on_admit(request_id, self.now)
        trace = self.traces[request_id]
        trace.mark_admitted(self.now)
        trace.overlap_tokens = entry.overlap
        self._log(EventKind.ADMIT_TO_BATCH, region_id, request_id, info=f"overlap={entry.overlap}")

    def _on_prefill_done(self, region_id: str | None, request_id: int) -> None:
        assert region_id is not None  # noqa: S101
        region = self.regions[region_id]
        entry = region.backend.on_prefill_done(request_id, self.now)
        if region.backend.model.prefix_caching:
            # the prefix may have been evicted and re-cached since the routing decision
            tokens = entry.request.tokens
            if self.proxy_mode:
                self.global_index.insert(tokens, region_id, self.now)
            else:
                region.mirror.insert(tokens, region_id, self.now)
        self.traces[request_id].mark_first_token(self.now, entry.prefill_us)
        self._log(EventKind.PREFILL_DONE, region_id, request_id, info=f"prefill_us={entry.prefill_us}")

    def _on_decode_tick(self, region_id: str | None, _: int) -> None:
        assert region_id is not None  # noqa: S101
        emitted = self.regions[region_id].backend.on_decode_tick(self.now)
        for request_id in emitted:
            self.traces[request_id].record_token(self.now)
        self._log(EventKind.DECODE_TICK, region_id, info=f"tokens={len(emitted)}")

    def _on_request_done(self, region_id: str | None, request_id: int) -> None:
        assert region_id is not None  # noqa: S101
        self.regions[region_id].backend.on_done(request_id, self.now)
        self.traces[request_id].finalize(completed_us=self.now)
        self._log(EventKind.REQUEST_DONE, region_id, request_id)
        self._retire()

    def _on_cache_evict(self, region_id: str, tokens: tuple[int, ...]) -> None:
        """A backend dropped a cached block: its own load balancer (or the proxy) stops counting on it."""
        region = self.regions[region_id]
        if self.proxy_mode:
            self.global_index.forget(tokens, region_id)
        else:
            region.mirror.forget(tokens, region_id)
        region.evicted.append(tokens)

    # Gossip
    def gossip_refresh(self, region_id: str) -> None:
        """Refresh one region's peer table and mirror the peers' newly served and evicted prefixes."""
        region = self.regions[region_id]
        served_logs = {rid: r.served for rid, r in self.regions.items()}
        evicted_logs = {rid: r.evicted for rid, r in self.regions.items()}
        for summary in self.gossip.refresh(region_id, self.now, served_logs, evicted_logs):
            if self.policy.mirror_peer_prefixes:
                # drops first: a prefix evicted and served again within one round stays held
                for tokens in summary.evicted_prefixes:
                    region.mirror.forget(tokens, summary.region_id)
                for tokens in summary.prefix_summary:
                    region.mirror.insert(tokens, summary.region_id, self.now)
        region.stats.queue_depth.append((self.now, len(region.backend.waiting)))
        self._log(EventKind.GOSSIP_REFRESH, region_id)

    def _on_gossip(self, _: str | None, __: int) -> None:
        ordered = sorted(self.regions)
        for rid in ordered:
            region = self.regions[rid]
            state = region.backend.state(self.now)
            self.gossip.publish(rid, self.now, state, len(region.served), len(region.evicted))
        for rid in ordered:
            self.gossip_refresh(rid)
        self.gossip.rounds += 1

        next_at = self.now + max(round(self.config.gossip_interval_ms * 1000), 1)
        if next_at <= self.horizon_us or (self.config.drain and self._active > 0):
            self.schedule(next_at, EventKind.GOSSIP_REFRESH, None, None)


def run(config: SimConfig, *, stream: ArrivalStream | None = None) -> tuple[list[SimEvent], RunReport]:
    """Run one simulation; the stream defaults to the config's workload.

    Raises:
        ConfigError: The workload is a sweep (use run_sweep) or cannot be built.
    """
    if stream is None and config.workload is not None:
        if isinstance(config.workload.shape, SweepShape):
            raise ConfigError("sweep workloads run through run_sweep")
        try:
            stream = build_stream(config.workload, config.duration_s, config.seed)
        except (OSError, ValueError) as e:
            raise ConfigError(f"workload: {e}") from e
    return Simulation(config, stream).run()


def run_strategy(config: SimConfig, strategy: Strategy) -> RunReport:
    """Report of ``config`` under ``strategy``; picklable entry point for worker processes."""
    _, report = run(config.with_strategy(strategy))
    return report


def write_event_log(events: Sequence[SimEvent], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for event in events:
            f.write(event.model_dump_json() + "\n")


class SweepStageResult(BaseModel):
    index: int
    rate: float
    report: RunReport


class SweepResult(BaseModel):
    stages: list[SweepStageResult]
    stop_reason: str | None = None


def run_sweep(config: SimConfig) -> SweepResult:
    """Run each constant-rate stage as an isolated simulation until the stop rule fires."""
    if config.workload is None or not isinstance(config.workload.shape, SweepShape):
        raise ConfigError("run_sweep needs a sweep workload")
    shape = config.workload.shape
    seed = config.workload.seed if config.workload.seed is not None else config.seed
    stage_config = config.model_copy(update={"duration_s": shape.stage_duration_s})

    stages: list[SweepStageResult] = []
    baseline_p99: float | None = None
    for stage in gen_sweep(
        shape.start,
        shape.step,
        shape.stage_duration_s,
        config.workload.source,
        seed,
        shape.max_stages,
        config.workload.output_tokens,
    ):
        _, report = run(stage_config, stream=stage.stream)
        stages.append(SweepStageResult(index=stage.index, rate=stage.rate, report=report))
        p99 = report.metrics["ttft_ms"].p99
        if baseline_p99 is None:
            baseline_p99 = p99
        reason = shape.stop.should_stop(p99, baseline_p99, report.counts.rejected)
        if reason is not None:
            logger.info(f"Sweep stopped after stage {stage.index} ({stage.rate:.3f} req/s): {reason}")
            return SweepResult(stages=stages, stop_reason=reason)
    return SweepResult(stages=stages)
