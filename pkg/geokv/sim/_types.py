"""Event types of the simulation loop."""

from __future__ import annotations

import enum

from pydantic import BaseModel, ConfigDict


class EventKind(str, enum.Enum):
    ARRIVAL = "Arrival"
    HOP_DELIVERY = "HopDelivery"
    ADMIT_TO_BATCH = "AdmitToBatch"
    PREFILL_DONE = "PrefillDone"
    DECODE_TICK = "DecodeTick"
    REQUEST_DONE = "RequestDone"
    GOSSIP_REFRESH = "GossipRefresh"
    PROXY_RETRY = "ProxyRetry"


# Same-instant ordering: gossip sees the state left by the previous instant, completions free
# slots before admissions, and new work arrives last.
EVENT_PRIORITY: dict[EventKind, int] = {
    EventKind.GOSSIP_REFRESH: 0,
    EventKind.REQUEST_DONE: 1,
    EventKind.PREFILL_DONE: 2,
    EventKind.DECODE_TICK: 3,
    EventKind.ADMIT_TO_BATCH: 4,
    EventKind.HOP_DELIVERY: 5,
    EventKind.ARRIVAL: 6,
    EventKind.PROXY_RETRY: 7,
}


class SimEvent(BaseModel):
    """One processed event; serialized one per line with this field order."""

    model_config = ConfigDict(frozen=True)

    at_us: int
    kind: EventKind
    region: str | None = None
    request_id: int | None = None
    target: str | None = None
    info: str | None = None
