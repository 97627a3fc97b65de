"""Per-request traces, summary statistics, run reports and policy comparisons."""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from geokv._logger import logger
from geokv.cost import CostBreakdown
from geokv.errors import ConfigMismatchError, TraceCorruptionError
from geokv.policy import DecisionKind

REPORT_SCHEMA_VERSION = 1

METRIC_LABELS: dict[str, str] = {
    "ttft_ms": "TTFT (ms)",
    "inter_token_latency_ms": "Inter-Token Latency (ms)",
    "request_latency_s": "Request Latency (s)",
    "time_per_output_token_ms": "Time Per Output Token (ms)",
    "tokens_per_s": "Tokens/s",
    "output_tokens_per_s": "Output Tokens/s",
    "prompt_tokens_per_s": "Prompt Tokens/s",
    "requests_per_s": "Requests/s",
}

# Rates improve upward, everything else downward.
HIGHER_IS_BETTER = frozenset({"tokens_per_s", "output_tokens_per_s", "prompt_tokens_per_s", "requests_per_s"})

STAT_COLUMNS = ("count", "mean", "median", "std_dev", "min", "max", "p50", "p90", "p95", "p99")
STAT_HEADERS = ("Count", "Mean", "Median", "Std. Dev.", "Min", "Max", "P50", "P90", "P95", "P99")

_US_PER_S = 1_000_000


class HopRecord(BaseModel):
    region_id: str
    ingress_us: int
    egress_us: int | None = None
    decision: DecisionKind | None = None
    breakdown: tuple[CostBreakdown, ...] = ()


class RequestTrace(BaseModel):
    """Lifecycle of one request in simulated microseconds.

    Ordering: created <= every hop ingress <= admitted <= first_token <= completed.
    """

    request_id: int
    created_at_us: int
    prompt_tokens: int
    output_tokens: int
    fallback_origin: bool = False
    hops: list[HopRecord] = Field(default_factory=list)
    served_region: str | None = None
    admitted_us: int | None = None
    first_token_us: int | None = None
    prefill_us: int | None = None
    token_times_us: list[int] = Field(default_factory=list)
    completed_us: int | None = None
    rejected_us: int | None = None
    cause: str | None = None
    overlap_tokens: int | None = None
    """Prefix tokens the serving backend actually had cached."""
    estimated_overlap_tokens: int | None = None
    """Prefix tokens the serving region's load balancer believed were cached."""

    def _corrupt(self, message: str) -> TraceCorruptionError:
        logger.error(f"Trace {self.request_id}: {message}")
        return TraceCorruptionError(f"request {self.request_id}: {message}")

    @property
    def last_ingress_us(self) -> int:
        return self.hops[-1].ingress_us if self.hops else self.created_at_us

    def record_hop(self, region_id: str, ingress_us: int) -> None:
        if ingress_us < self.created_at_us:
            raise self._corrupt(f"hop ingress {ingress_us} before creation {self.created_at_us}")
        if self.hops and ingress_us <= self.hops[-1].ingress_us:
            raise self._corrupt(f"hop ingress {ingress_us} not after {self.hops[-1].ingress_us}")
        if self.hops and self.hops[-1].egress_us is not None and ingress_us < self.hops[-1].egress_us:
            raise self._corrupt(f"hop ingress {ingress_us} before previous egress {self.hops[-1].egress_us}")
        self.hops.append(HopRecord(region_id=region_id, ingress_us=ingress_us))

    def record_decision(
        self, kind: DecisionKind, egress_us: int, breakdown: tuple[CostBreakdown, ...] = ()
    ) -> None:
        if not self.hops:
            raise self._corrupt("decision recorded before any hop")
        hop = self.hops[-1]
        if egress_us < hop.ingress_us:
            raise self._corrupt(f"egress {egress_us} before ingress {hop.ingress_us}")
        hop.egress_us = egress_us
        hop.decision = kind
        hop.breakdown = breakdown

    def mark_admitted(self, at_us: int) -> None:
        if at_us < self.last_ingress_us:
            raise self._corrupt(f"admitted at {at_us} before last ingress {self.last_ingress_us}")
        self.admitted_us = at_us

    def mark_first_token(self, at_us: int, prefill_us: int) -> None:
        if self.admitted_us is None or at_us < self.admitted_us:
            raise self._corrupt(f"first token at {at_us} before admission {self.admitted_us}")
        self.first_token_us = at_us
        self.prefill_us = prefill_us
        self.token_times_us.append(at_us)

    def record_token(self, at_us: int) -> None:
        if not self.token_times_us or at_us < self.token_times_us[-1]:
            raise self._corrupt(f"token at {at_us} out of order")
        self.token_times_us.append(at_us)

    def mark_rejected(self, at_us: int, cause: str | None) -> None:
        self.rejected_us = at_us
        self.cause = cause

    def finalize(self, first_token_us: int | None = None, completed_us: int | None = None) -> RequestTrace:
        """Close the trace, checking every ordering invariant.

        Raises:
            TraceCorruptionError: Timestamps are out of order.
        """
        if first_token_us is not None:
            self.first_token_us = first_token_us
        if completed_us is not None:
            self.completed_us = completed_us

        points: list[tuple[str, int]] = [("created", self.created_at_us)]
        points.extend((f"hop {h.region_id}", h.ingress_us) for h in self.hops)
        for name in ("admitted_us", "first_token_us", "completed_us"):
            value = getattr(self, name)
            if value is not None:
                points.append((name, value))
        for (prev_name, prev), (name, cur) in zip(points, points[1:], strict=False):
            if cur < prev:
                raise self._corrupt(f"{name}={cur} precedes {prev_name}={prev}")
        ingresses = [h.ingress_us for h in self.hops]
        if any(b <= a for a, b in zip(ingresses, ingresses[1:], strict=False)):
            raise self._corrupt(f"hop ingresses not strictly increasing: {ingresses}")
        return self

    @property
    def hop_count(self) -> int:
        return max(len(self.hops) - 1, 0)

    @property
    def terminal(self) -> bool:
        return self.completed_us is not None or self.rejected_us is not None

    @property
    def ttft_us(self) -> int | None:
        return None if self.first_token_us is None else self.first_token_us - self.created_at_us

    @property
    def ttft_ms(self) -> float | None:
        return None if self.ttft_us is None else self.ttft_us / 1000

    @property
    def latency_us(self) -> int | None:
        return None if self.completed_us is None else self.completed_us - self.created_at_us

    @property
    def itl_us(self) -> list[int]:
        return [b - a for a, b in zip(self.token_times_us, self.token_times_us[1:], strict=False)]


class SummaryStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    count: int = Field(default=0, ge=0)
    mean: float | None = None
    median: float | None = None
    std_dev: float | None = None
    min: float | None = None
    max: float | None = None
    p50: float | None = None
    p90: float | None = None
    p95: float | None = None
    p99: float | None = None


def nearest_rank(sorted_values: np.ndarray, percent: int) -> float:
    """Value at 1-based rank ceil(percent * n / 100) of an ascending array."""
    n = sorted_values.shape[0]
    rank = max(-(-percent * n // 100), 1)
    return float(sorted_values[rank - 1])


def aggregate(values: Sequence[float] | np.ndarray, ddof: int = 0) -> SummaryStats:
    """Count, mean, std (population by default), min/max and nearest-rank percentiles."""
    arr = np.sort(np.asarray(values, dtype=np.float64))
    n = int(arr.shape[0])
    if n == 0:
        return SummaryStats()
    p50 = nearest_rank(arr, 50)
    return SummaryStats(
        count=n,
        mean=float(arr.mean()),
        median=p50,
        std_dev=float(arr.std(ddof=ddof)) if n > ddof else None,
        min=float(arr[0]),
        max=float(arr[-1]),
        p50=p50,
        p90=nearest_rank(arr, 90),
        p95=nearest_rank(arr, 95),
        p99=nearest_rank(arr, 99),
    )


class RunCounts(BaseModel):
    injected: int = 0
    completed: int = 0
    rejected: int = 0
    in_flight: int = 0
    forwarded: int = 0
    fallback_origins: int = 0


class RegionAggregate(BaseModel):
    handled: int = 0
    """Requests whose decision was taken at this region, counting each hop."""
    served: int = 0
    forwarded: int = 0
    rejected: int = 0
    queue_depth: list[tuple[int, int]] = Field(default_factory=list)
    """(time_us, waiting requests) sampled at each gossip round."""


class RunReport(BaseModel):
    schema_version: int = REPORT_SCHEMA_VERSION
    policy: str
    config_digest: str
    seed: int
    duration_s: float
    metrics: dict[str, SummaryStats]
    counts: RunCounts = Field(default_factory=RunCounts)
    regions: dict[str, RegionAggregate] = Field(default_factory=dict)
    overlap_error_tokens: SummaryStats = Field(default_factory=SummaryStats)
    max_hop_count: int = 0
    traces: list[RequestTrace] = Field(default_factory=list, exclude=True)


def _windowed_rate(times_us: np.ndarray, weights: np.ndarray | None, n_windows: int) -> np.ndarray:
    if n_windows == 0:
        return np.zeros(0)
    bins = np.minimum(times_us // _US_PER_S, n_windows - 1)
    return np.bincount(bins, weights=weights, minlength=n_windows).astype(np.float64)


def build_report(
    traces: Sequence[RequestTrace],
    *,
    policy: str,
    config_digest: str,
    seed: int,
    duration_s: float,
    regions: Mapping[str, RegionAggregate] | None = None,
    ddof: int = 0,
) -> RunReport:
    """Aggregate finished traces into the per-metric report."""
    ttft = [t.ttft_us / 1000 for t in traces if t.ttft_us is not None]
    itl = [gap / 1000 for t in traces for gap in t.itl_us]
    completed = [t for t in traces if t.latency_us is not None]
    latency_s = [t.latency_us / _US_PER_S for t in completed if t.latency_us is not None]
    tpot = [t.latency_us / 1000 / t.output_tokens for t in completed if t.latency_us is not None]

    # Consecutive 1 s windows over the horizon, or over the drain tail when it runs longer.
    token_times = np.array([x for t in traces for x in t.token_times_us], dtype=np.int64)
    first_times = np.array([t.first_token_us for t in traces if t.first_token_us is not None], dtype=np.int64)
    first_prompts = np.array([t.prompt_tokens for t in traces if t.first_token_us is not None], dtype=np.float64)
    done_times = np.array([t.completed_us for t in completed], dtype=np.int64)
    last = max([*token_times.tolist(), *done_times.tolist(), 0])
    n_windows = max(math.ceil(duration_s - 1e-9), last // _US_PER_S + 1) if traces else 0

    output_rate = _windowed_rate(token_times, None, n_windows)
    prompt_rate = _windowed_rate(first_times, first_prompts, n_windows)
    metrics = {
        "ttft_ms": aggregate(ttft, ddof),
        "inter_token_latency_ms": aggregate(itl, ddof),
        "request_latency_s": aggregate(latency_s, ddof),
        "time_per_output_token_ms": aggregate(tpot, ddof),
        "tokens_per_s": aggregate(output_rate + prompt_rate, ddof),
        "output_tokens_per_s": aggregate(output_rate, ddof),
        "prompt_tokens_per_s": aggregate(prompt_rate, ddof),
        "requests_per_s": aggregate(_windowed_rate(done_times, None, n_windows), ddof),
    }

    overlap_error = [
        t.estimated_overlap_tokens - t.overlap_tokens
        for t in traces
        if t.estimated_overlap_tokens is not None and t.overlap_tokens is not None
    ]
    counts = RunCounts(
        injected=len(traces),
        completed=len(completed),
        rejected=sum(t.rejected_us is not None for t in traces),
        in_flight=sum(not t.terminal for t in traces),
        forwarded=sum(t.hop_count > 0 for t in traces),
        fallback_origins=sum(t.fallback_origin for t in traces),
    )
    return RunReport(
        policy=policy,
        config_digest=config_digest,
        seed=seed,
        duration_s=duration_s,
        metrics=metrics,
        counts=counts,
        regions=dict(regions or {}),
        overlap_error_tokens=aggregate(overlap_error, ddof),
        max_hop_count=max((t.hop_count for t in traces), default=0),
        traces=list(traces),
    )


def _fmt(value: float | int | None) -> str:
    if value is None:
        return "-"
    if isinstance(value, int):
        return str(value)
    return f"{value:.2f}"


def _render_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max([len(header[i]), *(len(r[i]) for r in rows)]) for i in range(len(header))]

    def line(cells: Sequence[str]) -> str:
        padded = (c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths, strict=True)))
        return "  ".join(padded)

    return "\n".join([line(header), "  ".join("-" * w for w in widths), *(line(r) for r in rows)])


def render_table(report: RunReport) -> str:
    """Metric rows by Count/Mean/Median/Std. Dev./Min/Max/P50/P90/P95/P99 columns."""
    rows = [
        [METRIC_LABELS[name], *(_fmt(getattr(stats, col)) for col in STAT_COLUMNS)]
        for name, stats in report.metrics.items()
    ]
    title = f"policy={report.policy} seed={report.seed} digest={report.config_digest[:12]}"
    c = report.counts
    footer = (
        f"injected={c.injected} completed={c.completed} rejected={c.rejected} "
        f"in_flight={c.in_flight} forwarded={c.forwarded} max_hops={report.max_hop_count}"
    )
    return f"{title}\n{_render_table(['Metric', *STAT_HEADERS], rows)}\n{footer}\n"


def export_report(report: RunReport, fmt: Literal["json", "table"] = "json") -> str:
    if fmt == "json":
        return report.model_dump_json(indent=2) + "\n"
    return render_table(report)


def load_report(path: str | Path) -> RunReport:
    return RunReport.model_validate_json(Path(path).read_text())


def export_ttft_csv(traces: Sequence[RequestTrace], path: str | Path) -> None:
    """Raw ``request_id,ttft_ms`` rows for requests that produced a first token."""
    data = np.array(
        [[t.request_id, t.ttft_us / 1000] for t in traces if t.ttft_us is not None], dtype=np.float64
    ).reshape(-1, 2)
    np.savetxt(path, data, delimiter=",", header="request_id,ttft_ms", comments="", fmt=["%d", "%.3f"])


class ComparisonRow(BaseModel):
    metric: str
    stat: Literal["median", "mean", "p99"]
    values: dict[str, float | None]
    ratios: dict[str, float | None]
    """Improvement factor against the baseline: >1 means better than the baseline."""


class Comparison(BaseModel):
    baseline: str
    labels: list[str]
    rows: list[ComparisonRow]

    @property
    def median_ttft_ratio(self) -> dict[str, float | None]:
        return next(r.ratios for r in self.rows if r.metric == "ttft_ms" and r.stat == "median")


def _improvement(metric: str, baseline: float | None, candidate: float | None) -> float | None:
    if baseline is None or candidate is None:
        return None
    if baseline == candidate:
        return 1.0
    num, den = (candidate, baseline) if metric in HIGHER_IS_BETTER else (baseline, candidate)
    return num / den if den != 0 else None


def compare_policies(reports: Sequence[RunReport], baseline: str | None = None) -> Comparison:
    """Median, mean and p99 of every metric side by side, with ratios against ``baseline``.

    Raises:
        ValueError: Fewer than two reports, duplicate labels or an unknown baseline.
        ConfigMismatchError: Reports come from configs that differ in more than the strategy.
    """
    if len(reports) < 2:
        raise ValueError(f"comparison needs at least 2 reports, got {len(reports)}")
    by_label = {r.policy: r for r in reports}
    if len(by_label) != len(reports):
        raise ValueError("reports must carry distinct policy labels")
    digests = {r.policy: r.config_digest for r in reports}
    if len(set(digests.values())) > 1:
        logger.error(f"Refusing to compare reports from different configs: {digests}")
        raise ConfigMismatchError(digests)
    baseline = baseline or reports[0].policy
    if baseline not in by_label:
        raise ValueError(f"unknown baseline {baseline!r}, have {sorted(by_label)}")

    labels = [r.policy for r in reports]
    rows: list[ComparisonRow] = []
    for metric in METRIC_LABELS:
        for stat in ("median", "mean", "p99"):
            values = {label: getattr(by_label[label].metrics[metric], stat) for label in labels}
            ratios = {label: _improvement(metric, values[baseline], values[label]) for label in labels}
            rows.append(ComparisonRow(metric=metric, stat=stat, values=values, ratios=ratios))
    return Comparison(baseline=baseline, labels=labels, rows=rows)


def render_comparison(comparison: Comparison) -> str:
    header = ["Metric", "Stat", *comparison.labels, *(f"x vs {comparison.baseline}: {lb}" for lb in comparison.labels)]
    rows = [
        [
            METRIC_LABELS[row.metric],
            row.stat,
            *(_fmt(row.values[lb]) for lb in comparison.labels),
            *(_fmt(row.ratios[lb]) for lb in comparison.labels),
        ]
        for row in comparison.rows
    ]
    headline = ", ".join(
        f"{lb}={_fmt(r)}x" for lb, r in comparison.median_ttft_ratio.items() if lb != comparison.baseline
    )
    return f"median TTFT improvement vs {comparison.baseline}: {headline}\n{_render_table(header, rows)}\n"
