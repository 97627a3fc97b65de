"""Tests for the additive TTFT cost model and prefill calibration."""

import numpy as np
import pytest

from geokv.cost import (
    CostParams,
    PrefillObservation,
    estimate_cost,
    fit_prefill_calibration,
    load_calibration,
    queue_wait_time,
    read_observations_csv,
    residual_prefill_time,
    saved_time,
    write_calibration,
    write_observations_csv,
)
from geokv.errors import CorruptOverlapError, DegenerateDesignError, InsufficientDataError
from geokv.policy import PeerSummary, RegionState


def test_saved_and_residual_time():
    """Test that overlap converts to time linearly."""
    assert saved_time(500, 0.0938) == pytest.approx(46.9)
    assert residual_prefill_time(1000, 500, 0.0938) == pytest.approx(46.9)
    assert residual_prefill_time(1000, 0, 0.0938) == pytest.approx(93.8)
    assert residual_prefill_time(1000, 1000, 0.0938) == 0


def test_residual_rejects_corrupt_overlap():
    """Test that an overlap outside [0, L_p] is rejected."""
    with pytest.raises(CorruptOverlapError):
        residual_prefill_time(10, 11, 0.1)
    with pytest.raises(CorruptOverlapError):
        residual_prefill_time(10, -1, 0.1)


def test_queue_wait_time():
    """Test that queue wait is pending tokens times t_p scaled by q_s."""
    assert queue_wait_time(1000, 0.0938, 1.0) == pytest.approx(93.8)
    assert queue_wait_time(1000, 0.0938, 0.5) == pytest.approx(46.9)
    assert queue_wait_time(0, 0.0938, 1.0) == 0


def test_estimate_cost_components():
    """Test that the total is network plus residual prefill plus queue wait."""
    state = RegionState(region_id="germany", running_tokens=300, waiting_tokens=200)
    peer = PeerSummary(region_id="germany", rtt_ms=281.0, state=state)
    breakdown = estimate_cost(peer, 1000, 400, CostParams())

    assert breakdown.network_ms == 281.0
    assert breakdown.prefill_ms == pytest.approx(600 * 0.0938)
    assert breakdown.queue_ms == pytest.approx(500 * 0.0938)
    assert breakdown.total_ms == pytest.approx(281.0 + 1100 * 0.0938)
    assert breakdown.overlap_tokens == 400
    assert not breakdown.stale


def test_estimate_cost_local_has_no_network_term():
    """Test that the local candidate pays no forwarding latency."""
    peer = PeerSummary(region_id="us-west", rtt_ms=50.0, state=RegionState(region_id="us-west"))
    assert estimate_cost(peer, 100, 0, CostParams(), is_local=True).network_ms == 0


def test_estimate_cost_stale_penalty():
    """Test that summaries older than the staleness bound are flagged and padded."""
    params = CostParams(refresh_interval_ms=100.0, stale_factor=5.0)
    peer = PeerSummary(region_id="israel", rtt_ms=10.0, state=RegionState(region_id="israel"), as_of_us=0)

    fresh = estimate_cost(peer, 100, 0, params, now_us=500_000)
    stale = estimate_cost(peer, 100, 0, params, now_us=500_001)
    assert not fresh.stale
    assert stale.stale
    assert stale.queue_ms == pytest.approx(fresh.queue_ms + 100.0)


def test_t_p_scale():
    """Test that the multiplicative override applies to every token-proportional term."""
    params = CostParams(t_p=0.1, t_p_scale=2.0)
    assert params.effective_t_p == pytest.approx(0.2)
    peer = PeerSummary(region_id="a", rtt_ms=0.0, state=RegionState(region_id="a", waiting_tokens=10))
    breakdown = estimate_cost(peer, 10, 0, params)
    assert breakdown.prefill_ms == pytest.approx(2.0)
    assert breakdown.queue_ms == pytest.approx(2.0)


def test_from_calibration_overrides():
    """Test that calibrated coefficients seed the params and explicit values win."""
    calibration = fit_prefill_calibration([
        PrefillObservation(input_tokens=0, ttft_ms=100.0),
        PrefillObservation(input_tokens=1000, ttft_ms=200.0),
    ])
    params = CostParams.from_calibration(calibration, q_s=0.5)
    assert params.t_p == pytest.approx(0.1)
    assert params.base_latency == pytest.approx(100.0)
    assert params.q_s == 0.5


def test_calibration_recovers_line():
    """Test that an exact line is recovered with R^2 = 1."""
    xs = np.arange(64, 64 + 87 * 48, 48)
    observations = [PrefillObservation(input_tokens=int(x), ttft_ms=150.72 + 0.0938 * x) for x in xs]
    calibration = fit_prefill_calibration(observations)

    assert calibration.intercept == pytest.approx(150.72, abs=1e-6)
    assert calibration.slope == pytest.approx(0.0938, abs=1e-9)
    assert calibration.r_squared == pytest.approx(1.0)
    assert calibration.n == 87
    assert calibration.predict(1000) == pytest.approx(244.52)


def test_calibration_noisy_line():
    """Test that noise lowers R^2 but the fit stays close."""
    rng = np.random.default_rng(0)
    xs = rng.integers(100, 8000, size=200)
    observations = [
        PrefillObservation(input_tokens=int(x), ttft_ms=float(150 + 0.09 * x + rng.normal(0, 5))) for x in xs
    ]
    calibration = fit_prefill_calibration(observations)
    assert calibration.slope == pytest.approx(0.09, rel=0.02)
    assert 0.95 < calibration.r_squared < 1.0


def test_calibration_errors():
    """Test the two calibration failure modes."""
    with pytest.raises(InsufficientDataError):
        fit_prefill_calibration([PrefillObservation(input_tokens=10, ttft_ms=1.0)])
    with pytest.raises(DegenerateDesignError):
        fit_prefill_calibration([
            PrefillObservation(input_tokens=10, ttft_ms=1.0),
            PrefillObservation(input_tokens=10, ttft_ms=2.0),
        ])


def test_bundled_samples_fit(configs_dir):
    """Test that the bundled sample file reproduces the reference coefficients."""
    calibration = fit_prefill_calibration(read_observations_csv(configs_dir / "calibration_samples.csv"))
    assert calibration.n == 87
    assert calibration.intercept == pytest.approx(150.72, abs=1e-4)
    assert calibration.slope == pytest.approx(0.0938, abs=1e-8)


def test_observation_and_calibration_files(tmp_path):
    """Test that samples and fitted calibrations survive a write/read cycle."""
    observations = [PrefillObservation(input_tokens=i * 100, ttft_ms=100 + i * 9.5) for i in range(1, 6)]
    csv_path = tmp_path / "samples.csv"
    write_observations_csv(csv_path, observations)
    assert csv_path.read_text().splitlines()[0] == "input_tokens,ttft_ms"
    assert read_observations_csv(csv_path) == observations

    calibration = fit_prefill_calibration(observations)
    write_calibration(tmp_path / "cal.json", calibration)
    assert load_calibration(tmp_path / "cal.json") == calibration


def test_read_observations_header_only(tmp_path):
    """Test that a header-only file yields no observations."""
    path = tmp_path / "empty.csv"
    path.write_text("input_tokens,ttft_ms\n")
    assert read_observations_csv(path) == []
