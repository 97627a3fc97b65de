"""Mock continuous-batching backend: FIFO waiting queue, tick-aligned admission, calibrated prefill."""

from __future__ import annotations

from collections import deque
from collections.abc import Callable, Sequence

from geokv._logger import logger
from geokv.policy import RegionState, Request
from geokv.prefix_index import EvictionHook, PrefixIndex
from geokv.sim._types import EventKind
from geokv.sim.config import BackendModel

Scheduler = Callable[[int, EventKind, str, int | None], None]
"""(at_us, kind, region_id, request_id) -> None"""


class BatchEntry:
    __slots__ = (
        "admit_at_us",
        "emitted",
        "joined_decode_us",
        "overlap",
        "phase",
        "prefill_start_us",
        "prefill_us",
        "request",
        "residual",
    )

    def __init__(self, request: Request, admit_at_us: int) -> None:
        self.request = request
        self.phase = "admitting"
        self.admit_at_us = admit_at_us
        self.overlap = 0
        self.residual = request.prompt_tokens
        self.prefill_start_us = 0
        self.prefill_us = 0
        self.emitted = 0
        self.joined_decode_us = 0

    def kv_tokens(self) -> int:
        return self.request.prompt_tokens + self.emitted


class Backend:
    """One region's inference server.

    The running batch holds at most ``max_running`` requests; a slot is reserved from the moment an
    admission is scheduled. Admissions land on iteration boundaries (multiples of ``itl_ms``).
    """

    def __init__(
        self,
        region_id: str,
        model: BackendModel,
        block_size: int,
        schedule: Scheduler,
        on_evict: EvictionHook | None = None,
    ) -> None:
        self.region_id = region_id
        self.model = model
        self.itl_us = max(round(model.itl_ms * 1000), 1)
        self.cache = PrefixIndex(block_size, max(model.kv_capacity_tokens // block_size, 1), on_evict=on_evict)
        self.running: dict[int, BatchEntry] = {}
        self.waiting: deque[Request] = deque()
        self.waiting_tokens = 0
        self._schedule = schedule
        self._decode_pending = False

    def next_tick(self, now_us: int) -> int:
        return -(-now_us // self.itl_us) * self.itl_us

    def prefill_us(self, residual_tokens: int) -> int:
        calibration = self.model.prefill
        return max(round((calibration.intercept + calibration.slope * residual_tokens) * 1000), 0)

    def _finish_after_first_token(self, first_token_us: int, output_tokens: int) -> int:
        """Completion time of a request whose first token lands at ``first_token_us``."""
        if output_tokens <= 1:
            return first_token_us
        return (first_token_us // self.itl_us + output_tokens - 1) * self.itl_us

    def _expected_release(self, request: Request, admit_at_us: int) -> int:
        overlap = 0
        if self.model.prefix_caching:
            overlap = min(self.cache.overlap_for_node(request.tokens, self.region_id), request.prompt_tokens)
        first = admit_at_us + self.prefill_us(request.prompt_tokens - overlap)
        return self._finish_after_first_token(first, request.output_tokens)

    def release_us(self, entry: BatchEntry, now_us: int) -> int:
        """Expected instant ``entry`` frees its batch slot: the rest of its prefill plus every decode step left."""
        out = entry.request.output_tokens
        match entry.phase:
            case "admitting":
                return self._expected_release(entry.request, entry.admit_at_us)
            case "prefill":
                return self._finish_after_first_token(entry.prefill_start_us + entry.prefill_us, out)
            case "decode":
                return (now_us // self.itl_us + out - entry.emitted) * self.itl_us
            case _:
                return now_us

    def slot_wait_us(self, now_us: int, seated: Sequence[Request] = ()) -> int:
        """Time until the earliest slot holder finishes; ``seated`` are arrivals about to take free slots."""
        releases = [self.release_us(e, now_us) for e in self.running.values()]
        admit_at = self.next_tick(now_us)
        releases.extend(self._expected_release(r, admit_at) for r in seated)
        if not releases:
            return 0
        return max(min(releases) - now_us, 0)

    def state(self, now_us: int, incoming: Sequence[Request] = ()) -> RegionState:
        """Admission state as the region's load balancer sees it.

        ``running_tokens`` is the admission delay of a new arrival caused by a full batch, expressed
        in prompt tokens at the calibrated prefill rate: zero while a slot is free, otherwise the wait
        for the earliest slot release. ``incoming`` are requests already routed here and still on the
        wire; they take free slots first and queue behind the waiting requests otherwise.
        """
        free = 0 if self.waiting else max(self.model.max_running - len(self.running), 0)
        seated = min(len(incoming), free)
        overflow = incoming[seated:]
        full = len(self.running) + len(incoming) >= self.model.max_running or bool(self.waiting)
        wait_ms = self.slot_wait_us(now_us, incoming[:seated]) / 1000 if full else 0.0
        kv = sum(e.kv_tokens() for e in self.running.values())
        return RegionState(
            region_id=self.region_id,
            running_requests=len(self.running) + seated,
            running_tokens=round(wait_ms / self.model.prefill.slope),
            waiting_requests=len(self.waiting) + len(overflow),
            waiting_tokens=self.waiting_tokens + sum(r.prompt_tokens for r in overflow),
            kv_cache_used_fraction=min(kv / self.model.kv_capacity_tokens, 1.0),
            t_p_measured=self.model.prefill.slope,
            queue_limit_tokens=self.model.max_queue_tokens,
        )

    def _reserve(self, request: Request, now_us: int) -> None:
        at_us = self.next_tick(now_us)
        self.running[request.id] = BatchEntry(request, at_us)
        self._schedule(at_us, EventKind.ADMIT_TO_BATCH, self.region_id, request.id)

    def admit(self, request: Request, now_us: int) -> bool:
        """Reserve a batch slot or join the waiting queue; False when the queue is full."""
        if len(self.running) < self.model.max_running and not self.waiting:
            self._reserve(request, now_us)
            return True
        limit = self.model.max_queue_tokens
        if limit is not None and self.waiting_tokens + request.prompt_tokens > limit:
            logger.warning(
                f"{self.region_id}: waiting queue full ({self.waiting_tokens}+{request.prompt_tokens} > {limit}), "
                f"rejecting request {request.id}"
            )
            return False
        self.waiting.append(request)
        self.waiting_tokens += request.prompt_tokens
        return True

    def on_admit(self, request_id: int, now_us: int) -> BatchEntry:
        """Start prefill of the uncached part of the prompt."""
        entry = self.running[request_id]
        tokens = entry.request.tokens
        if self.model.prefix_caching:
            entry.overlap = min(self.cache.overlap_for_node(tokens, self.region_id), len(tokens))
        entry.residual = len(tokens) - entry.overlap
        entry.prefill_us = self.prefill_us(entry.residual)
        entry.prefill_start_us = now_us
        entry.phase = "prefill"
        self._schedule(now_us + entry.prefill_us, EventKind.PREFILL_DONE, self.region_id, request_id)
        return entry

    def on_prefill_done(self, request_id: int, now_us: int) -> BatchEntry:
        """First token; the prompt's KV now sits in the prefix cache."""
        entry = self.running[request_id]
        entry.emitted = 1
        if self.model.prefix_caching:
            self.cache.insert(entry.request.tokens, self.region_id, now_us)
        if entry.emitted >= entry.request.output_tokens:
            entry.phase = "done"
            self._schedule(now_us, EventKind.REQUEST_DONE, self.region_id, request_id)
            return entry
        entry.phase = "decode"
        entry.joined_decode_us = now_us
        if not self._decode_pending:
            self._decode_pending = True
            self._schedule((now_us // self.itl_us + 1) * self.itl_us, EventKind.DECODE_TICK, self.region_id, None)
        return entry

    def on_decode_tick(self, now_us: int) -> list[int]:
        """One decoding iteration: every decode entry that joined before this tick emits a token."""
        self._decode_pending = False
        emitted: list[int] = []
        remaining = False
        for request_id, entry in self.running.items():
            if entry.phase != "decode":
                continue
            if entry.joined_decode_us >= now_us:
                remaining = True
                continue
            entry.emitted += 1
            emitted.append(request_id)
            if entry.emitted >= entry.request.output_tokens:
                entry.phase = "done"
                self._schedule(now_us, EventKind.REQUEST_DONE, self.region_id, request_id)
            else:
                remaining = True
        if remaining:
            self._decode_pending = True
            self._schedule(now_us + self.itl_us, EventKind.DECODE_TICK, self.region_id, None)
        return emitted

    def on_done(self, request_id: int, now_us: int) -> BatchEntry:
        """Retire a request and admit the head of the waiting queue into freed slots."""
        entry = self.running.pop(request_id)
        while self.waiting and len(self.running) < self.model.max_running:
            head = self.waiting.popleft()
            self.waiting_tokens -= head.prompt_tokens
            self._reserve(head, now_us)
        return entry
