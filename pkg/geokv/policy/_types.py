"""Type definitions for routing requests and decisions."""

from __future__ import annotations

import enum
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from geokv.cost import CostBreakdown, CostParams
from geokv.geo import GeoPoint


class Strategy(str, enum.Enum):
    LEAST_LOAD = "least_load"
    PREFIX_TRIE = "prefix_trie"
    GORGO = "gorgo"
    GORGO_PROXY = "gorgo_proxy"


class DecisionKind(str, enum.Enum):
    SERVE_LOCAL = "serve_local"
    FORWARD = "forward"
    QUEUE_LOCAL = "queue_local"
    REJECT = "reject"


class Hop(BaseModel):
    model_config = ConfigDict(frozen=True)

    region_id: str
    ingress_us: int = Field(ge=0)


class Request(BaseModel):
    """A routed unit of work. Timestamps are simulated microseconds."""

    id: int = Field(ge=0)
    tokens: tuple[int, ...]
    origin: GeoPoint
    created_at_us: int = Field(ge=0)
    output_tokens: int = Field(default=1, ge=1)
    hop_trace: list[Hop] = Field(default_factory=list)

    @property
    def prompt_tokens(self) -> int:
        return len(self.tokens)

    @property
    def hop_count(self) -> int:
        return max(len(self.hop_trace) - 1, 0)

    @property
    def visited(self) -> set[str]:
        return {hop.region_id for hop in self.hop_trace}

    def add_hop(self, region_id: str, ingress_us: int, max_hops: int | None = None) -> None:
        """Append a hop; ingress times must strictly increase and the hop bound must hold."""
        if self.hop_trace and ingress_us <= self.hop_trace[-1].ingress_us:
            raise ValueError(
                f"request {self.id}: hop ingress {ingress_us} not after {self.hop_trace[-1].ingress_us}"
            )
        if max_hops is not None and len(self.hop_trace) > max_hops:
            raise ValueError(f"request {self.id}: would exceed max_hops={max_hops}")
        self.hop_trace.append(Hop(region_id=region_id, ingress_us=ingress_us))


class RegionState(BaseModel):
    """Admission state of one region as mirrored by its load balancer."""

    model_config = ConfigDict(frozen=True)

    region_id: str
    running_requests: int = Field(default=0, ge=0)
    running_tokens: int = Field(default=0, ge=0)
    """Running-batch work ahead of a new arrival, in prompt tokens at the measured prefill rate.

    Zero while the batch has a free slot; with a full batch, the wait until the earliest running
    request (prefill and decode) releases its slot.
    """
    waiting_requests: int = Field(default=0, ge=0)
    waiting_tokens: int = Field(default=0, ge=0)
    kv_cache_used_fraction: float = Field(default=0.0, ge=0, le=1)
    t_p_measured: float = Field(default=0.0938, gt=0)
    queue_limit_tokens: int | None = Field(default=None, ge=0)
    """Waiting-queue cap; None means unbounded."""

    @property
    def pending_tokens(self) -> int:
        return self.running_tokens + self.waiting_tokens

    def queue_has_room(self, tokens: int) -> bool:
        return self.queue_limit_tokens is None or self.waiting_tokens + tokens <= self.queue_limit_tokens


class PeerSummary(BaseModel):
    """Gossiped view of a peer region."""

    model_config = ConfigDict(frozen=True)

    region_id: str
    rtt_ms: float = Field(ge=0, allow_inf_nan=False)
    state: RegionState
    prefix_summary: tuple[tuple[int, ...], ...] = ()
    """Prompts the peer started serving since its previous summary."""
    evicted_prefixes: tuple[tuple[int, ...], ...] = ()
    """Cached prefixes the peer dropped since its previous summary."""
    as_of_us: int = Field(default=0, ge=0)


class Decision(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: DecisionKind
    region_id: str
    """Region that made the decision."""
    target: str | None = None
    breakdown: tuple[CostBreakdown, ...] = ()
    chosen_cost: float | None = None
    strategy: Strategy
    cause: str | None = None

    @model_validator(mode="after")
    def _forward_has_target(self) -> Decision:
        if (self.kind == DecisionKind.FORWARD) != (self.target is not None):
            raise ValueError("forward decisions, and only they, carry a target")
        return self


class PolicyConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    strategy: Strategy = Strategy.GORGO
    max_hops: int = Field(default=2, ge=1)
    running_threshold: int = Field(default=10, ge=1)
    kv_cache_limit: float = Field(default=0.9, gt=0, le=1)
    load_metric: Literal["tokens", "requests"] = "tokens"
    """Availability measure of least-load routing."""
    cost: CostParams = Field(default_factory=CostParams)
    calibrate_t_p: bool = True
    """Take t_p from the local backend's measured per-token rate instead of ``cost.t_p``."""
