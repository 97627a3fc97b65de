"""Simulation config document: regions, network, policy, workload and telemetry options."""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from geokv._logger import logger
from geokv.cost import DEFAULT_BASE_LATENCY_MS, DEFAULT_PREFILL_MS_PER_TOKEN, Calibration, load_calibration
from geokv.errors import ConfigError
from geokv.geo import GeoPoint
from geokv.policy import PolicyConfig, Strategy
from geokv.prefix_index import DEFAULT_BLOCK_SIZE, DEFAULT_CAPACITY_BLOCKS
from geokv.workload import WorkloadSpec, resolve_source_paths

CONFIG_VERSION = 1


def default_calibration() -> Calibration:
    return Calibration(
        intercept=DEFAULT_BASE_LATENCY_MS, slope=DEFAULT_PREFILL_MS_PER_TOKEN, r_squared=1.0, n=87
    )


class BackendModel(BaseModel):
    """Mock continuous-batching inference server of one region."""

    model_config = ConfigDict(frozen=True)

    max_running: int = Field(default=10, ge=1)
    prefill: Calibration = Field(default_factory=default_calibration)
    prefill_file: Path | None = None
    """Calibration JSON written by ``geokv calibrate``; replaces ``prefill`` when the config is loaded."""
    itl_ms: float = Field(default=12.5, gt=0)
    kv_capacity_tokens: int = Field(default=200_000, gt=0)
    max_queue_tokens: int | None = Field(default=32_768, ge=0)
    prefix_caching: bool = True

    @model_validator(mode="after")
    def _positive_slope(self) -> BackendModel:
        if self.prefill.slope <= 0:
            raise ValueError(f"prefill slope must be positive, got {self.prefill.slope}")
        return self


class NetworkModel(BaseModel):
    """Symmetric one-way latency table between regions, in ms."""

    model_config = ConfigDict(frozen=True)

    rtt_ms: dict[str, dict[str, float]] = Field(default_factory=dict)
    intra_region_ms: float = Field(default=0.0, ge=0)
    jitter_fraction: float = Field(default=0.0, ge=0, lt=1)
    seed: int | None = Field(default=None, ge=0)
    """Jitter seed; None uses the simulation seed."""

    @model_validator(mode="after")
    def _non_negative_symmetric(self) -> NetworkModel:
        for a, row in self.rtt_ms.items():
            for b, value in row.items():
                if value < 0:
                    raise ValueError(f"latency {a}->{b} is negative: {value}")
                mirrored = self.rtt_ms.get(b, {}).get(a)
                if mirrored is not None and mirrored != value:
                    raise ValueError(f"latency table not symmetric: {a}->{b}={value}, {b}->{a}={mirrored}")
        return self

    def lookup_ms(self, a: str, b: str) -> float | None:
        value = self.rtt_ms.get(a, {}).get(b)
        if value is None:
            value = self.rtt_ms.get(b, {}).get(a)
        if value is None and a == b:
            return self.intra_region_ms
        return value


class RegionConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1)
    location: GeoPoint
    backend: BackendModel = BackendModel()


class SimPolicyConfig(PolicyConfig):
    proxy_region: str | None = None
    """Vantage point of gorgo_proxy; defaults to the first region."""
    proxy_retry_ms: float = Field(default=50.0, gt=0)
    mirror_peer_prefixes: bool = True
    """Feed peers' gossiped prompts into each load balancer's prefix index."""
    block_size: int = Field(default=DEFAULT_BLOCK_SIZE, ge=1)
    mirror_capacity_blocks: int = Field(default=DEFAULT_CAPACITY_BLOCKS, ge=1)


class TelemetryConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    ddof: Literal[0, 1] = 0
    """0 reports population std, 1 sample std."""
    event_log: bool = True


class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    version: Literal[1] = CONFIG_VERSION
    seed: int = Field(default=0, ge=0)
    duration_s: float = Field(default=60.0, gt=0)
    drain: bool = True
    """Keep running past the horizon until every injected request is terminal."""
    gossip_interval_ms: float = Field(default=500.0, gt=0)
    regions: list[RegionConfig] = Field(min_length=1)
    network: NetworkModel = NetworkModel()
    policy: SimPolicyConfig = SimPolicyConfig()
    workload: WorkloadSpec | None = None
    telemetry: TelemetryConfig = TelemetryConfig()

    @model_validator(mode="after")
    def _consistent(self) -> SimConfig:
        ids = [r.id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate region ids: {ids}")
        missing = [(a, b) for a in ids for b in ids if a < b and self.network.lookup_ms(a, b) is None]
        if missing:
            raise ValueError(f"network table lacks latencies for {missing}")
        if self.policy.proxy_region is not None and self.policy.proxy_region not in ids:
            raise ValueError(f"proxy_region {self.policy.proxy_region!r} is not a region")
        return self

    @property
    def region_ids(self) -> list[str]:
        return [r.id for r in self.regions]

    @property
    def routing_policy(self) -> SimPolicyConfig:
        """The policy in effect: summary staleness is measured in this run's gossip intervals."""
        cost = self.policy.cost.model_copy(update={"refresh_interval_ms": self.gossip_interval_ms})
        return self.policy.model_copy(update={"cost": cost})

    @property
    def proxy_region(self) -> str:
        return self.policy.proxy_region or self.regions[0].id

    @property
    def network_seed(self) -> int:
        return self.network.seed if self.network.seed is not None else self.seed

    def with_strategy(self, strategy: Strategy) -> SimConfig:
        return self.model_copy(update={"policy": self.policy.model_copy(update={"strategy": strategy})})

    def with_seed(self, seed: int) -> SimConfig:
        return self.model_copy(update={"seed": seed})

    def digest(self) -> str:
        """sha256 of the document with the strategy normalised, so strategy variants share a digest."""
        canonical = self.with_strategy(Strategy.GORGO).model_dump_json()
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _field_errors(e: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors())


def _resolve_paths(config: SimConfig, base_dir: Path) -> SimConfig:
    regions = []
    for region in config.regions:
        backend = region.backend
        if backend.prefill_file is not None:
            path = backend.prefill_file if backend.prefill_file.is_absolute() else base_dir / backend.prefill_file
            try:
                calibration = load_calibration(path)
            except (OSError, ValueError) as e:
                raise ConfigError(f"regions.{region.id}.backend.prefill_file: cannot load {path}: {e}") from e
            backend = backend.model_copy(update={"prefill": calibration, "prefill_file": path})
            if calibration.slope <= 0:
                raise ConfigError(f"regions.{region.id}.backend.prefill_file: slope must be positive")
        regions.append(region.model_copy(update={"backend": backend}))

    update: dict[str, object] = {"regions": regions}
    if config.workload is not None:
        update["workload"] = config.workload.model_copy(
            update={"source": resolve_source_paths(config.workload.source, base_dir)}
        )
    return config.model_copy(update=update)


def load_config(path: str | Path) -> SimConfig:
    """Load a YAML (``.yaml``/``.yml``) or JSON config document.

    Relative file paths inside the document resolve against the document's directory.

    Raises:
        ConfigError: The file is unreadable or fails validation; the message lists field errors.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e

    try:
        if path.suffix in (".yaml", ".yml"):
            raw = yaml.safe_load(text)
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            config = SimConfig.model_validate(raw)
        else:
            config = SimConfig.model_validate_json(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    except ValidationError as e:
        logger.error(f"Invalid config {path}")
        raise ConfigError(f"{path}: {_field_errors(e)}") from e

    config = _resolve_paths(config, path.parent)
    logger.info(f"Loaded config {path}: {len(config.regions)} regions, strategy {config.policy.strategy.value}")
    return config
