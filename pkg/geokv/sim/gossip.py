"""Periodic peer-summary exchange between regional load balancers."""

from __future__ import annotations

import math
from collections import deque
from collections.abc import Mapping, Sequence

from pydantic import BaseModel, ConfigDict

from geokv._logger import logger
from geokv.policy import PeerSummary, RegionState
from geokv.sim.network import GOSSIP_STREAM, Network

LATENCY_EMA_ALPHA = 0.3

PrefixLog = Sequence[tuple[int, ...]]


def ema_update(previous: float | None, sample: float, alpha: float = LATENCY_EMA_ALPHA) -> float:
    """Exponential moving average seeded by the first sample."""
    if previous is None:
        return sample
    return alpha * sample + (1.0 - alpha) * previous


class RegionSnapshot(BaseModel):
    model_config = ConfigDict(frozen=True)

    at_us: int
    state: RegionState
    served_count: int
    """Length of the region's served-prompt log when the snapshot was taken."""
    evicted_count: int = 0
    """Length of the region's evicted-prefix log when the snapshot was taken."""


class PeerEntry:
    __slots__ = ("evicted_cursor", "latency_ms", "served_cursor", "summary")

    def __init__(self) -> None:
        self.latency_ms: float | None = None
        self.summary: PeerSummary | None = None
        self.served_cursor = 0
        self.evicted_cursor = 0


class GossipLayer:
    """Every region publishes a snapshot per round; a peer sees it one network delay later.

    Each round an observer also samples the one-way delay to every peer, the same delay a forwarded
    request pays, and smooths it into the latency its cost model charges for forwarding there.

    Before any snapshot has had time to propagate, a load balancer uses the oldest snapshot it has
    so peer tables are populated from the first round.
    """

    def __init__(self, region_ids: Sequence[str], network: Network, interval_ms: float) -> None:
        self.region_ids = sorted(region_ids)
        self.network = network
        self.interval_ms = interval_ms
        slowest = max(
            (network.latency_ms(a, b) for a in self.region_ids for b in self.region_ids if a != b), default=0.0
        )
        depth = math.ceil(slowest / interval_ms) + 3
        self._history: dict[str, deque[RegionSnapshot]] = {r: deque(maxlen=depth) for r in self.region_ids}
        self._tables: dict[str, dict[str, PeerEntry]] = {
            obs: {peer: PeerEntry() for peer in self.region_ids if peer != obs} for obs in self.region_ids
        }
        self._index = {r: i for i, r in enumerate(self.region_ids)}
        self.rounds = 0

    def publish(
        self, region_id: str, at_us: int, state: RegionState, served_count: int, evicted_count: int = 0
    ) -> None:
        self._history[region_id].append(
            RegionSnapshot(at_us=at_us, state=state, served_count=served_count, evicted_count=evicted_count)
        )

    def _visible(self, peer: str, observer: str, now_us: int) -> RegionSnapshot | None:
        delay_us = round(self.network.latency_ms(peer, observer) * 1000)
        visible = None
        for snapshot in self._history[peer]:
            if snapshot.at_us <= now_us - delay_us:
                visible = snapshot
        return visible

    def refresh(
        self,
        observer: str,
        now_us: int,
        served_logs: Mapping[str, PrefixLog],
        evicted_logs: Mapping[str, PrefixLog] | None = None,
    ) -> list[PeerSummary]:
        """Update ``observer``'s peer table; returns the summaries replaced this round."""
        updated: list[PeerSummary] = []
        for peer, entry in self._tables[observer].items():
            key = (GOSSIP_STREAM, self.rounds, self._index[observer], self._index[peer])
            entry.latency_ms = ema_update(entry.latency_ms, self.network.sample_ms(observer, peer, key))

            snapshot = self._visible(peer, observer, now_us)
            if snapshot is None and entry.summary is None and self._history[peer]:
                snapshot = self._history[peer][0]
            if snapshot is None or (entry.summary is not None and snapshot.at_us <= entry.summary.as_of_us):
                if entry.summary is not None:
                    entry.summary = entry.summary.model_copy(
                        update={"rtt_ms": entry.latency_ms, "prefix_summary": (), "evicted_prefixes": ()}
                    )
                continue

            prompts = tuple(served_logs.get(peer, ())[entry.served_cursor : snapshot.served_count])
            entry.served_cursor = max(entry.served_cursor, snapshot.served_count)
            evicted: tuple[tuple[int, ...], ...] = ()
            if evicted_logs is not None:
                evicted = tuple(evicted_logs.get(peer, ())[entry.evicted_cursor : snapshot.evicted_count])
                entry.evicted_cursor = max(entry.evicted_cursor, snapshot.evicted_count)
            entry.summary = PeerSummary(
                region_id=peer,
                rtt_ms=entry.latency_ms,
                state=snapshot.state,
                prefix_summary=prompts,
                evicted_prefixes=evicted,
                as_of_us=snapshot.at_us,
            )
            updated.append(entry.summary)
        logger.debug(f"Gossip round {self.rounds} at {observer}: {len(updated)} peer summaries replaced")
        return updated

    def peer_summaries(self, observer: str) -> list[PeerSummary]:
        return [e.summary for e in self._tables[observer].values() if e.summary is not None]

    def latency_ms(self, observer: str, peer: str) -> float | None:
        """Smoothed one-way delay from ``observer`` to ``peer``; None before the first round."""
        return self._tables[observer][peer].latency_ms
