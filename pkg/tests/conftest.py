from pathlib import Path

import pytest

from geokv.geo import GeoPoint
from geokv.policy import PolicyConfig, RegionState, Request
from geokv.sim import BackendModel, NetworkModel, RegionConfig, SimConfig, SimPolicyConfig
from geokv.workload import pseudo_tokenize

CONFIGS_DIR = Path(__file__).parent.parent / "configs"

SAN_FRANCISCO = GeoPoint(lat=37.77, lon=-122.42)
FRANKFURT = GeoPoint(lat=50.11, lon=8.68)
TEL_AVIV = GeoPoint(lat=32.08, lon=34.78)


@pytest.fixture
def configs_dir() -> Path:
    return CONFIGS_DIR


@pytest.fixture
def make_request():
    """Factory for routed requests built from raw text or an explicit token tuple."""

    def factory(
        text: str | None = None,
        *,
        tokens: tuple[int, ...] | None = None,
        request_id: int = 0,
        origin: GeoPoint = SAN_FRANCISCO,
        output_tokens: int = 1,
    ) -> Request:
        if tokens is None:
            tokens = pseudo_tokenize(text or "abcd")
        return Request(id=request_id, tokens=tokens, origin=origin, created_at_us=0, output_tokens=output_tokens)

    return factory


@pytest.fixture
def busy_state():
    """Factory for a region at its running threshold."""

    def factory(region_id: str, running_tokens: int = 0, waiting_tokens: int = 0, **kwargs) -> RegionState:
        return RegionState(
            region_id=region_id,
            running_requests=kwargs.pop("running_requests", 10),
            running_tokens=running_tokens,
            waiting_tokens=waiting_tokens,
            **kwargs,
        )

    return factory


@pytest.fixture
def policy_config() -> PolicyConfig:
    return PolicyConfig()


@pytest.fixture
def three_regions() -> list[RegionConfig]:
    return [
        RegionConfig(id="us-west", location=SAN_FRANCISCO),
        RegionConfig(id="germany", location=FRANKFURT),
        RegionConfig(id="israel", location=TEL_AVIV),
    ]


@pytest.fixture
def three_region_network() -> NetworkModel:
    return NetworkModel(rtt_ms={"us-west": {"germany": 281, "israel": 183}, "germany": {"israel": 60}})


@pytest.fixture
def single_region_config() -> SimConfig:
    """One idle region, no gossip traffic to speak of, no workload."""
    return SimConfig(
        seed=0,
        duration_s=1,
        regions=[RegionConfig(id="solo", location=SAN_FRANCISCO, backend=BackendModel())],
        policy=SimPolicyConfig(),
    )


@pytest.fixture
def three_region_config(three_regions, three_region_network) -> SimConfig:
    return SimConfig(seed=0, duration_s=2, regions=three_regions, network=three_region_network)
