"""Tests for environment settings and config document loading."""

from pathlib import Path

import pytest

from geokv._config import GeoKVSettings
from geokv.errors import ConfigError
from geokv.policy import Strategy
from geokv.sim import SimConfig, Simulation, load_config
from geokv.workload import PoissonShape, ReplayShape, TraceSource


def test_settings_defaults():
    """Test that GeoKVSettings has correct default values."""
    settings = GeoKVSettings()
    assert settings.seed is None
    assert settings.out_dir == Path("out")


def test_settings_from_env(monkeypatch):
    """Test that GeoKVSettings loads from environment variables."""
    monkeypatch.setenv("GEOKV_SEED", "42")
    monkeypatch.setenv("GEOKV_OUT_DIR", "/tmp/geokv-runs")
    monkeypatch.setenv("GEOKV_JOBS", "4")

    settings = GeoKVSettings()
    assert settings.seed == 42
    assert settings.out_dir == Path("/tmp/geokv-runs")
    # only the seed and the output directory are read from the environment
    assert not hasattr(settings, "jobs")


def test_settings_env_file_loading(tmp_path, monkeypatch):
    """Test that GeoKVSettings can load from a .env file."""
    (tmp_path / ".env").write_text("GEOKV_SEED=15\nGEOKV_OUT_DIR=runs\n")
    monkeypatch.chdir(tmp_path)

    settings = GeoKVSettings()
    assert settings.seed == 15
    assert settings.out_dir == Path("runs")


def test_load_bundled_configs(configs_dir):
    """Test that every bundled config validates."""
    three = load_config(configs_dir / "three_region.yaml")
    assert three.region_ids == ["us-west", "germany", "israel"]
    assert isinstance(three.workload.shape, PoissonShape)
    assert three.policy.strategy == Strategy.GORGO

    scenario = load_config(configs_dir / "scenario_network_cache.yaml")
    assert isinstance(scenario.workload.shape, ReplayShape)
    assert isinstance(scenario.workload.source, TraceSource)
    # trace paths resolve against the config's directory
    assert scenario.workload.source.prompts == configs_dir / "scenario" / "prompts.jsonl"
    assert scenario.workload.source.prompts.exists()

    load_config(configs_dir / "sweep.yaml")


def test_load_config_json(tmp_path, three_region_config):
    """Test that JSON documents load like YAML ones."""
    path = tmp_path / "sim.json"
    path.write_text(three_region_config.model_dump_json())
    assert load_config(path).digest() == three_region_config.digest()


def test_load_config_reports_field_errors(tmp_path):
    """Test that validation failures name the offending field."""
    path = tmp_path / "bad.yaml"
    path.write_text(
        "regions:\n"
        "  - id: a\n"
        "    location: {lat: 95, lon: 0}\n"
    )
    with pytest.raises(ConfigError, match=r"regions\.0\.location\.lat"):
        load_config(path)


def test_load_config_missing_latency(tmp_path):
    """Test that a latency table missing a region pair is rejected."""
    path = tmp_path / "gap.yaml"
    path.write_text(
        "regions:\n"
        "  - {id: a, location: {lat: 0, lon: 0}}\n"
        "  - {id: b, location: {lat: 1, lon: 1}}\n"
    )
    with pytest.raises(ConfigError, match="lacks latencies"):
        load_config(path)


def test_load_config_asymmetric_latency(tmp_path):
    """Test that an asymmetric latency table is rejected."""
    path = tmp_path / "asym.yaml"
    path.write_text(
        "regions:\n"
        "  - {id: a, location: {lat: 0, lon: 0}}\n"
        "  - {id: b, location: {lat: 1, lon: 1}}\n"
        "network:\n"
        "  rtt_ms: {a: {b: 10}, b: {a: 12}}\n"
    )
    with pytest.raises(ConfigError, match="symmetric"):
        load_config(path)


def test_load_config_unknown_key(tmp_path):
    """Test that unknown top-level keys are rejected."""
    path = tmp_path / "extra.yaml"
    path.write_text("regions:\n  - {id: a, location: {lat: 0, lon: 0}}\nfrobnicate: 1\n")
    with pytest.raises(ConfigError, match="frobnicate"):
        load_config(path)


def test_load_config_unreadable(tmp_path):
    """Test that a missing file is a config error, not an OSError."""
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.yaml")


def test_load_config_invalid_yaml(tmp_path):
    """Test that YAML syntax errors surface as config errors."""
    path = tmp_path / "broken.yaml"
    path.write_text("regions: [\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(path)


def test_prefill_file_replaces_inline_calibration(tmp_path):
    """Test that a calibration file referenced by a backend is loaded relative to the document."""
    (tmp_path / "cal.json").write_text('{"intercept": 100.0, "slope": 0.05, "r_squared": 0.99, "n": 10}')
    path = tmp_path / "sim.yaml"
    path.write_text(
        "regions:\n"
        "  - id: a\n"
        "    location: {lat: 0, lon: 0}\n"
        "    backend: {prefill_file: cal.json}\n"
    )
    config = load_config(path)
    assert config.regions[0].backend.prefill.intercept == 100.0
    assert config.regions[0].backend.prefill.slope == 0.05


def test_digest_ignores_strategy(three_region_config):
    """Test that strategy variants share a digest while other changes do not."""
    base = three_region_config.digest()
    assert three_region_config.with_strategy(Strategy.LEAST_LOAD).digest() == base
    assert three_region_config.with_seed(99).digest() != base


def test_proxy_region_defaults_to_first(three_region_config):
    """Test that the proxy vantage point defaults to the first configured region."""
    assert three_region_config.proxy_region == "us-west"
    with pytest.raises(ValueError, match="proxy_region"):
        SimConfig.model_validate({
            **three_region_config.model_dump(),
            "policy": {"proxy_region": "mars"},
        })


def test_staleness_follows_gossip_interval(configs_dir):
    """Test that summaries go stale after five gossip rounds of the run, with a one-round penalty."""
    config = load_config(configs_dir / "scenario_network_cache.yaml")
    assert config.gossip_interval_ms == 100
    cost = config.routing_policy.cost
    assert cost.stale_after_ms == 500
    assert cost.refresh_interval_ms == 100
    assert Simulation(config).policy.cost.stale_after_ms == 500
