"""Routing cost model: prefix overlap to time, queue wait, additive per-region cost, prefill calibration."""

from __future__ import annotations

import math
from collections.abc import Sequence
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field

from geokv._logger import logger
from geokv.errors import CorruptOverlapError, DegenerateDesignError, InsufficientDataError

if TYPE_CHECKING:
    from geokv.policy._types import PeerSummary

DEFAULT_BASE_LATENCY_MS = 150.72
"""Fixed per-request overhead measured on the reference deployment."""

DEFAULT_PREFILL_MS_PER_TOKEN = 0.0938
"""Per-token prefill time measured on the reference deployment."""

CALIBRATION_CSV_HEADER = "input_tokens,ttft_ms"


class CostParams(BaseModel):
    """Weights of the additive cost model.

    ``t_p`` is both the measured per-token prefill rate and a tunable weight; ``t_p_scale`` is the
    multiplicative override applied on top of a calibrated value.
    """

    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    t_p: float = Field(default=DEFAULT_PREFILL_MS_PER_TOKEN, gt=0)
    """Per-token prefill time, ms/token."""

    q_s: float = Field(default=1.0, ge=0)
    """Dimensionless queue-wait weight."""

    base_latency: float = Field(default=DEFAULT_BASE_LATENCY_MS, ge=0)
    """Fixed request overhead, ms. Identical for every candidate, so it never moves the argmin."""

    t_p_scale: float = Field(default=1.0, gt=0)

    refresh_interval_ms: float = Field(default=500.0, gt=0)
    """Gossip refresh interval the staleness bound and the stale penalty are expressed in."""

    stale_factor: float = Field(default=5.0, gt=0)
    """A peer summary older than stale_factor * refresh_interval_ms is stale."""

    exclude_after_ms: float | None = Field(default=None, gt=0)
    """Summaries older than this are dropped from the candidate set. None keeps every candidate."""

    @property
    def effective_t_p(self) -> float:
        return self.t_p * self.t_p_scale

    @property
    def stale_after_ms(self) -> float:
        return self.stale_factor * self.refresh_interval_ms

    @classmethod
    def from_calibration(cls, calibration: Calibration, **overrides: float | None) -> CostParams:
        """Seed t_p and base_latency from a fitted calibration."""
        values: dict[str, float | None] = {"t_p": calibration.slope, "base_latency": max(calibration.intercept, 0.0)}
        values.update(overrides)
        return cls.model_validate(values)


class CostBreakdown(BaseModel):
    """The three additive TTFT components estimated for one candidate region."""

    model_config = ConfigDict(frozen=True)

    region_id: str = ""
    network_ms: float = Field(ge=0)
    prefill_ms: float = Field(ge=0)
    queue_ms: float = Field(ge=0)
    overlap_tokens: int = Field(default=0, ge=0)
    stale: bool = False

    @computed_field  # type: ignore[prop-decorator]
    @property
    def total_ms(self) -> float:
        return self.network_ms + self.prefill_ms + self.queue_ms


class Calibration(BaseModel):
    """Least-squares line of TTFT against input tokens."""

    model_config = ConfigDict(allow_inf_nan=False)

    intercept: float
    """ms"""
    slope: float
    """ms/token"""
    r_squared: float = Field(ge=0, le=1)
    n: int = Field(ge=2)

    def predict(self, input_tokens: float) -> float:
        return self.intercept + self.slope * input_tokens


class PrefillObservation(BaseModel):
    input_tokens: int = Field(ge=0)
    ttft_ms: float = Field(ge=0)


def saved_time(l_hit: int, t_p: float) -> float:
    """Prefill time skipped thanks to ``l_hit`` cached prefix tokens."""
    return l_hit * t_p


def residual_prefill_time(l_p: int, l_hit: int, t_p: float) -> float:
    """Prefill time left for the uncached part of an ``l_p``-token prompt.

    Raises:
        CorruptOverlapError: If the overlap is negative or longer than the prompt.
    """
    if l_hit < 0 or l_hit > l_p:
        logger.error(f"Overlap estimate {l_hit} outside [0, {l_p}]")
        raise CorruptOverlapError(f"prefix overlap {l_hit} is not within [0, {l_p}]")
    return (l_p - l_hit) * t_p


def queue_wait_time(pending_tokens: int, t_p: float, q_s: float) -> float:
    """Admission delay estimate: every queued or still-running prompt token costs ``t_p``."""
    return q_s * pending_tokens * t_p


def summary_age_ms(candidate: PeerSummary, now_us: int) -> float:
    return max(0, now_us - candidate.as_of_us) / 1000.0


def estimate_cost(
    candidate: PeerSummary,
    request_tokens: int,
    overlap_tokens: int,
    params: CostParams,
    *,
    now_us: int | None = None,
    is_local: bool = False,
) -> CostBreakdown:
    """Estimate TTFT of serving a request on ``candidate``.

    The local region has no forwarding hop, so its network term is zero. A peer summary older than
    ``params.stale_after_ms`` is flagged stale and its queue term is padded by one refresh interval.

    Args:
        candidate: Summary of the region being scored (peer or local).
        request_tokens: Prompt length L_p.
        overlap_tokens: Longest cached prefix L_hit on the candidate.
        params: Cost weights.
        now_us: Current time; enables the staleness check when given.
        is_local: Score the candidate as the local region.
    """
    t_p = params.effective_t_p
    network_ms = 0.0 if is_local else candidate.rtt_ms
    prefill_ms = residual_prefill_time(request_tokens, overlap_tokens, t_p)
    queue_ms = queue_wait_time(candidate.state.pending_tokens, t_p, params.q_s)

    stale = False
    if now_us is not None and not is_local:
        age_ms = summary_age_ms(candidate, now_us)
        if age_ms > params.stale_after_ms:
            stale = True
            queue_ms += params.refresh_interval_ms
            logger.debug(f"Summary of {candidate.region_id} is {age_ms:.1f} ms old, penalising")

    return CostBreakdown(
        region_id=candidate.region_id,
        network_ms=network_ms,
        prefill_ms=prefill_ms,
        queue_ms=queue_ms,
        overlap_tokens=overlap_tokens,
        stale=stale,
    )


def fit_prefill_calibration(observations: Sequence[PrefillObservation]) -> Calibration:
    """Ordinary least squares of ttft_ms on input_tokens.

    Raises:
        InsufficientDataError: Fewer than two observations.
        DegenerateDesignError: All observations share one input length.
    """
    n = len(observations)
    if n < 2:
        raise InsufficientDataError(f"calibration needs at least 2 observations, got {n}")

    x = np.array([o.input_tokens for o in observations], dtype=np.float64)
    y = np.array([o.ttft_ms for o in observations], dtype=np.float64)
    if np.all(x == x[0]):
        raise DegenerateDesignError(f"all {n} observations have input_tokens={int(x[0])}")

    design = np.column_stack([np.ones_like(x), x])
    (intercept, slope), *_ = np.linalg.lstsq(design, y, rcond=None)

    residuals = y - (intercept + slope * x)
    ss_res = float(np.dot(residuals, residuals))
    centered = y - y.mean()
    ss_tot = float(np.dot(centered, centered))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    r_squared = min(max(r_squared, 0.0), 1.0)

    if not (math.isfinite(intercept) and math.isfinite(slope)):  # pragma: no cover
        raise DegenerateDesignError("least-squares fit did not converge to finite coefficients")

    calibration = Calibration(intercept=float(intercept), slope=float(slope), r_squared=r_squared, n=n)
    logger.info(
        f"Calibrated prefill model on {n} samples: y = {calibration.intercept:.4f} + {calibration.slope:.6f}x "
        f"(R^2={calibration.r_squared:.4f})"
    )
    return calibration


def read_observations_csv(path: str | Path) -> list[PrefillObservation]:
    """Read ``input_tokens,ttft_ms`` rows (header line required)."""
    path = Path(path)
    lines = [line for line in path.read_text().splitlines() if line.strip()]
    if len(lines) <= 1:
        return []
    try:
        data = np.loadtxt(lines[1:], delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as e:
        raise InsufficientDataError(f"{path}: cannot parse calibration samples: {e}") from e
    if data.shape[1] != 2:
        raise InsufficientDataError(f"{path}: expected 2 columns ({CALIBRATION_CSV_HEADER}), got {data.shape[1]}")
    return [PrefillObservation(input_tokens=int(row[0]), ttft_ms=float(row[1])) for row in data]


def write_observations_csv(path: str | Path, observations: Sequence[PrefillObservation]) -> None:
    data = np.array([[o.input_tokens, o.ttft_ms] for o in observations], dtype=np.float64).reshape(-1, 2)
    np.savetxt(path, data, delimiter=",", header=CALIBRATION_CSV_HEADER, comments="", fmt=["%d", "%.17g"])


def write_calibration(path: str | Path, calibration: Calibration) -> None:
    Path(path).write_text(calibration.model_dump_json(indent=2) + "\n")


def load_calibration(path: str | Path) -> Calibration:
    return Calibration.model_validate_json(Path(path).read_text())
