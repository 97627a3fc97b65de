"""Inter-region latency with optional seeded multiplicative jitter."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from geokv.errors import ConfigError
from geokv.sim.config import NetworkModel

REQUEST_STREAM = 0
GOSSIP_STREAM = 1


class Network:
    def __init__(self, model: NetworkModel, seed: int) -> None:
        self.model = model
        self.seed = seed

    def latency_ms(self, a: str, b: str) -> float:
        value = self.model.lookup_ms(a, b)
        if value is None:
            raise ConfigError(f"no latency configured between {a} and {b}")
        return value

    def sample_ms(self, a: str, b: str, key: Sequence[int]) -> float:
        """Latency with a jitter draw that depends only on the seed and ``key``."""
        base = self.latency_ms(a, b)
        jitter = self.model.jitter_fraction
        if jitter == 0 or base == 0:
            return base
        rng = np.random.default_rng([self.seed, *key])
        return base * (1.0 + float(rng.uniform(-jitter, jitter)))

    def delay_us(self, request_id: int, hop: int, a: str, b: str) -> int:
        delay = round(self.sample_ms(a, b, (REQUEST_STREAM, request_id, hop)) * 1000)
        if a != b:
            delay = max(delay, 1)
        return delay

    def deliver(self, request_id: int, hop: int, from_region: str, to_region: str, now_us: int) -> int:
        """Time a request forwarded at ``now_us`` reaches ``to_region``."""
        return now_us + self.delay_us(request_id, hop, from_region, to_region)
