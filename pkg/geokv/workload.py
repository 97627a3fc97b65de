"""Request streams: concurrent, Poisson, throughput, trace-replay and sweep shapes over synthetic or trace prompts."""

from __future__ import annotations

import math
from collections.abc import Iterator, Sequence
from pathlib import Path
from typing import Annotated, Literal, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from geokv._logger import logger
from geokv.errors import TraceParseError
from geokv.geo import FNV64_OFFSET_BASIS, FNV64_PRIME, GeoLookup, GeoPoint, fnv1a_64, prompt_hash, resolve_origin

TOKEN_WINDOW_BYTES = 4
VOCAB_SIZE = 2**16

_ALPHABET_SIZE = 26


# Length distributions
class ConstantLength(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["constant"] = "constant"
    value: int = Field(ge=0)

    @property
    def mean(self) -> float:
        return float(self.value)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.full(size, self.value, dtype=np.int64)


class LognormalLength(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["lognormal"] = "lognormal"
    median: float = Field(gt=0)
    sigma: float = Field(default=0.6, ge=0)
    min: int = Field(default=1, ge=0)
    max: int = Field(default=8192, ge=1)

    @property
    def mean(self) -> float:
        return self.median * math.exp(self.sigma**2 / 2)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        draws = rng.lognormal(mean=math.log(self.median), sigma=self.sigma, size=size)
        return np.clip(np.rint(draws), self.min, self.max).astype(np.int64)


LengthDist = Annotated[ConstantLength | LognormalLength, Field(discriminator="kind")]


# Prompt sources
class OriginHotspot(BaseModel):
    """A cluster of users; origins are drawn around ``point`` with ``spread_deg`` gaussian jitter."""

    model_config = ConfigDict(frozen=True)

    point: GeoPoint
    weight: float = Field(default=1.0, gt=0)
    spread_deg: float = Field(default=0.0, ge=0)


class SyntheticSource(BaseModel):
    """Prompts made of one of K shared prefixes followed by a unique suffix."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["synthetic"] = "synthetic"
    num_prefixes: int = Field(default=8, ge=1)
    prefix_tokens: LengthDist = ConstantLength(value=256)
    suffix_tokens: LengthDist = LognormalLength(median=256)
    prefix_weights: tuple[float, ...] | None = None
    # San Francisco; illustrative
    origins: tuple[OriginHotspot, ...] = (OriginHotspot(point=GeoPoint(lat=37.77, lon=-122.42)),)


class TraceSource(BaseModel):
    """Prompts from a ``{"prompt": ...}`` JSONL file with origins from a geo lookup file."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["trace"] = "trace"
    prompts: Path
    geolookup: Path
    fallback: GeoPoint = GeoPoint(lat=0.0, lon=0.0)


PromptSource = Annotated[SyntheticSource | TraceSource, Field(discriminator="kind")]


class PromptItem(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str
    text_hash: int
    tokens: tuple[int, ...]
    origin: GeoPoint
    fallback: bool = False
    group: int | None = None
    """Shared-prefix group of a synthetic prompt."""
    at_us: int | None = None
    """Arrival instant recorded in a replayed trace."""


class Arrival(BaseModel):
    model_config = ConfigDict(frozen=True)

    at_us: int = Field(ge=0)
    prompt: PromptItem
    output_tokens: int = Field(ge=1)


# Workload shapes
class ConcurrentShape(BaseModel):
    kind: Literal["concurrent"] = "concurrent"
    n: int = Field(ge=1)


class PoissonShape(BaseModel):
    kind: Literal["poisson"] = "poisson"
    rate: float = Field(gt=0)
    """Requests per second."""


class ThroughputShape(BaseModel):
    kind: Literal["throughput"] = "throughput"
    ceiling: float = Field(default=1000.0, gt=0)
    """Back-to-back arrival rate cap, requests per second."""


class ReplayShape(BaseModel):
    """Arrivals at the ``at_ms`` instants recorded in a trace."""

    kind: Literal["replay"] = "replay"


class SweepStopRule(BaseModel):
    model_config = ConfigDict(frozen=True)

    p99_multiple: float = Field(default=5.0, gt=1)
    stop_on_rejection: bool = True

    def should_stop(self, stage_p99: float | None, baseline_p99: float | None, rejected: int) -> str | None:
        """Reason to end the sweep after a stage, or None to continue."""
        if self.stop_on_rejection and rejected > 0:
            return f"{rejected} rejections"
        if stage_p99 is not None and baseline_p99 is not None and stage_p99 > self.p99_multiple * baseline_p99:
            return f"p99 {stage_p99:.2f} ms > {self.p99_multiple}x baseline {baseline_p99:.2f} ms"
        return None


class SweepShape(BaseModel):
    kind: Literal["sweep"] = "sweep"
    start: float = Field(gt=0)
    step: float = Field(gt=0)
    stage_duration_s: float = Field(default=30.0, gt=0)
    max_stages: int = Field(default=20, ge=1)
    stop: SweepStopRule = SweepStopRule()


WorkloadShape = Annotated[
    ConcurrentShape | PoissonShape | ThroughputShape | ReplayShape | SweepShape,
    Field(discriminator="kind"),
]


class WorkloadSpec(BaseModel):
    shape: WorkloadShape
    source: PromptSource = SyntheticSource()
    output_tokens: LengthDist = ConstantLength(value=64)
    seed: int | None = None
    """Workload RNG seed; None uses the simulation seed."""


# Tokenization
def pseudo_tokenize(text: str) -> tuple[int, ...]:
    """Deterministic stand-in for a tokenizer: one token per 4-byte window of UTF-8 text.

    Each window is FNV-1a hashed into a 2**16 vocabulary, so texts sharing a prefix share the token
    prefix covering every complete window.
    """
    data = text.encode("utf-8")
    full = len(data) - len(data) % TOKEN_WINDOW_BYTES
    tokens: list[int] = []
    if full:
        windows = np.frombuffer(data[:full], dtype=np.uint8).reshape(-1, TOKEN_WINDOW_BYTES).astype(np.uint64)
        h = np.full(windows.shape[0], FNV64_OFFSET_BASIS, dtype=np.uint64)
        prime = np.uint64(FNV64_PRIME)
        for column in range(TOKEN_WINDOW_BYTES):
            h ^= windows[:, column]
            h *= prime
        tokens = (h % np.uint64(VOCAB_SIZE)).astype(np.int64).tolist()
    if full < len(data):
        tokens.append(fnv1a_64(data[full:]) % VOCAB_SIZE)
    return tuple(tokens)


def _random_text(rng: np.random.Generator, windows: int) -> str:
    letters = rng.integers(0, _ALPHABET_SIZE, size=windows * TOKEN_WINDOW_BYTES, dtype=np.uint8) + ord("a")
    return letters.tobytes().decode("ascii")


def _make_item(
    text: str, origin: GeoPoint, *, fallback: bool = False, group: int | None = None, at_us: int | None = None
) -> PromptItem:
    return PromptItem(
        text=text,
        text_hash=prompt_hash(text),
        tokens=pseudo_tokenize(text),
        origin=origin,
        fallback=fallback,
        group=group,
        at_us=at_us,
    )


class PromptSampler:
    """Endless, seed-deterministic sequence of prompts from a source."""

    def __init__(self, source: SyntheticSource | TraceSource, rng: np.random.Generator) -> None:
        self._source = source
        self._rng = rng
        self._trace: list[PromptItem] = []
        self._cursor = 0
        if isinstance(source, TraceSource):
            self._trace = load_trace(source.prompts, source.geolookup, source.fallback).items
            return

        lengths = source.prefix_tokens.sample(rng, source.num_prefixes)
        self._prefixes = [_random_text(rng, int(n)) for n in lengths]
        weights = np.asarray(source.prefix_weights or [1.0] * source.num_prefixes, dtype=np.float64)
        if weights.shape[0] != source.num_prefixes:
            raise ValueError(f"prefix_weights has {weights.shape[0]} entries, expected {source.num_prefixes}")
        self._prefix_p = weights / weights.sum()
        origin_weights = np.asarray([o.weight for o in source.origins], dtype=np.float64)
        self._origin_p = origin_weights / origin_weights.sum()

    def _origin(self) -> GeoPoint:
        assert isinstance(self._source, SyntheticSource)  # noqa: S101
        hotspot = self._source.origins[int(self._rng.choice(len(self._source.origins), p=self._origin_p))]
        if hotspot.spread_deg == 0:
            return hotspot.point
        dlat, dlon = self._rng.normal(0.0, hotspot.spread_deg, size=2)
        return GeoPoint(
            lat=float(np.clip(hotspot.point.lat + dlat, -90, 90)),
            lon=float((hotspot.point.lon + dlon + 180) % 360 - 180),
        )

    def next(self) -> PromptItem:
        if isinstance(self._source, TraceSource):
            if not self._trace:
                raise ValueError(f"trace {self._source.prompts} holds no prompts")
            item = self._trace[self._cursor % len(self._trace)]
            self._cursor += 1
            return item

        group = int(self._rng.choice(len(self._prefixes), p=self._prefix_p))
        suffix_windows = int(self._source.suffix_tokens.sample(self._rng, 1)[0])
        text = self._prefixes[group] + _random_text(self._rng, suffix_windows)
        if not text:
            # empty prompts cannot be routed; keep one window
            text = _random_text(self._rng, 1)
        return _make_item(text, self._origin(), group=group)


def synth_shared_prefix(source: SyntheticSource, count: int, seed: int) -> list[PromptItem]:
    """Population of ``count`` prompts, each one of K shared prefixes plus a unique suffix."""
    sampler = PromptSampler(source, np.random.default_rng(seed))
    return [sampler.next() for _ in range(count)]


# Arrival streams
class ArrivalStream(Protocol):
    def initial(self) -> list[Arrival]: ...

    def on_complete(self, now_us: int) -> Arrival | None: ...


class ScheduledStream:
    """Open-loop stream: every arrival is known up front."""

    def __init__(self, arrivals: Sequence[Arrival]) -> None:
        self.arrivals = list(arrivals)

    def __len__(self) -> int:
        return len(self.arrivals)

    def initial(self) -> list[Arrival]:
        return list(self.arrivals)

    def on_complete(self, now_us: int) -> Arrival | None:
        return None


class ClosedLoopStream:
    """Keeps ``n`` requests in flight: a burst of ``n`` at t=0, then one arrival per completion."""

    def __init__(
        self,
        n: int,
        duration_s: float,
        sampler: PromptSampler,
        output_tokens: ConstantLength | LognormalLength,
        rng: np.random.Generator,
    ) -> None:
        self.n = n
        self.horizon_us = round(duration_s * 1e6)
        self._sampler = sampler
        self._output_tokens = output_tokens
        self._rng = rng

    def _arrival(self, at_us: int) -> Arrival:
        output = max(int(self._output_tokens.sample(self._rng, 1)[0]), 1)
        return Arrival(at_us=at_us, prompt=self._sampler.next(), output_tokens=output)

    def initial(self) -> list[Arrival]:
        return [self._arrival(0) for _ in range(self.n)]

    def on_complete(self, now_us: int) -> Arrival | None:
        if now_us >= self.horizon_us:
            return None
        return self._arrival(now_us)


def _attach(
    times_us: Sequence[int],
    sampler: PromptSampler,
    output_tokens: ConstantLength | LognormalLength,
    rng: np.random.Generator,
) -> list[Arrival]:
    outputs = np.maximum(output_tokens.sample(rng, len(times_us)), 1)
    return [
        Arrival(at_us=int(at), prompt=sampler.next(), output_tokens=int(out))
        for at, out in zip(times_us, outputs, strict=True)
    ]


def poisson_times_us(rate: float, duration_s: float, rng: np.random.Generator) -> list[int]:
    """Arrival instants of a Poisson process on [0, duration_s)."""
    times: list[float] = []
    t = 0.0
    batch = max(int(rate * duration_s * 1.1) + 16, 16)
    while t < duration_s:
        gaps = rng.exponential(1.0 / rate, size=batch)
        for gap in gaps:
            t += float(gap)
            if t >= duration_s:
                break
            times.append(t)
    return [round(x * 1e6) for x in times]


def gen_concurrent(
    n: int,
    duration_s: float,
    source: SyntheticSource | TraceSource,
    seed: int,
    output_tokens: ConstantLength | LognormalLength = ConstantLength(value=64),
) -> ClosedLoopStream:
    rng = np.random.default_rng(seed)
    return ClosedLoopStream(n, duration_s, PromptSampler(source, rng), output_tokens, rng)


def gen_poisson(
    rate: float,
    duration_s: float,
    source: SyntheticSource | TraceSource,
    seed: int,
    output_tokens: ConstantLength | LognormalLength = ConstantLength(value=64),
) -> ScheduledStream:
    """Exponential inter-arrivals with mean 1/rate."""
    if rate <= 0:
        raise ValueError(f"rate must be positive, got {rate}")
    rng = np.random.default_rng(seed)
    times = poisson_times_us(rate, duration_s, rng)
    return ScheduledStream(_attach(times, PromptSampler(source, rng), output_tokens, rng))


def gen_throughput(
    duration_s: float,
    source: SyntheticSource | TraceSource,
    seed: int,
    ceiling: float = 1000.0,
    output_tokens: ConstantLength | LognormalLength = ConstantLength(value=64),
) -> ScheduledStream:
    """Back-to-back arrivals at the ceiling rate, enough to saturate every queue."""
    rng = np.random.default_rng(seed)
    count = math.ceil(duration_s * ceiling - 1e-9)
    times = [round(k * 1e6 / ceiling) for k in range(count)]
    return ScheduledStream(_attach(times, PromptSampler(source, rng), output_tokens, rng))


def gen_replay(
    source: TraceSource,
    duration_s: float,
    seed: int,
    output_tokens: ConstantLength | LognormalLength = ConstantLength(value=64),
) -> ScheduledStream:
    """Replay a trace at its recorded instants; records past the horizon are dropped."""
    trace = load_trace(source.prompts, source.geolookup, source.fallback)
    missing = sum(item.at_us is None for item in trace.items)
    if missing:
        raise ValueError(f"{source.prompts}: {missing} records lack at_ms, cannot replay")
    horizon_us = round(duration_s * 1e6)
    items = sorted((i for i in trace.items if i.at_us is not None and i.at_us < horizon_us), key=lambda i: i.at_us or 0)
    outputs = np.maximum(output_tokens.sample(np.random.default_rng(seed), len(items)), 1)
    return ScheduledStream(
        [
            Arrival(at_us=item.at_us or 0, prompt=item, output_tokens=int(out))
            for item, out in zip(items, outputs, strict=True)
        ]
    )


class SweepStage(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    index: int
    rate: float
    seed: int
    stream: ScheduledStream


def gen_sweep(
    start: float,
    step: float,
    stage_duration_s: float,
    source: SyntheticSource | TraceSource,
    seed: int,
    max_stages: int = 20,
    output_tokens: ConstantLength | LognormalLength = ConstantLength(value=64),
) -> Iterator[SweepStage]:
    """Constant-rate Poisson stages at ``start + k * step``; the driver applies the stop rule between stages."""
    if start <= 0 or step <= 0:
        raise ValueError(f"sweep needs start > 0 and step > 0, got start={start} step={step}")
    for k in range(max_stages):
        rate = start + k * step
        stage_seed = seed + k
        logger.info(f"Sweep stage {k}: {rate:.3f} req/s for {stage_duration_s}s")
        yield SweepStage(
            index=k,
            rate=rate,
            seed=stage_seed,
            stream=gen_poisson(rate, stage_duration_s, source, stage_seed, output_tokens),
        )


# Trace files
class PromptRecord(BaseModel):
    prompt: str
    at_ms: float | None = Field(default=None, ge=0)


class TracePromptSet(BaseModel):
    items: list[PromptItem]
    misses: int = 0


def load_trace(
    prompts_jsonl: str | Path,
    geolookup_jsonl: str | Path,
    fallback: GeoPoint = GeoPoint(lat=0.0, lon=0.0),
) -> TracePromptSet:
    """Read prompts and resolve each prompt's origin through the geo lookup.

    Raises:
        TraceParseError: A prompt line is not ``{"prompt": <string>}`` JSON.
    """
    lookup = GeoLookup.from_jsonl(geolookup_jsonl)
    items: list[PromptItem] = []
    misses = 0
    with Path(prompts_jsonl).open(encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = PromptRecord.model_validate_json(line)
            except ValidationError as e:
                logger.error(f"Malformed prompt line {prompts_jsonl}:{line_no}")
                raise TraceParseError(str(prompts_jsonl), line_no, str(e)) from e
            resolved = resolve_origin(prompt_hash(record.prompt), lookup, fallback)
            misses += resolved.fallback
            at_us = None if record.at_ms is None else round(record.at_ms * 1000)
            items.append(_make_item(record.prompt, resolved.point, fallback=resolved.fallback, at_us=at_us))
    if misses:
        logger.warning(f"{misses}/{len(items)} prompts in {prompts_jsonl} missing from the geo lookup")
    logger.info(f"Loaded {len(items)} trace prompts from {prompts_jsonl}")
    return TracePromptSet(items=items, misses=misses)


def export_prompts(
    items: Sequence[PromptItem], prompts_path: str | Path, lookup_path: str | Path | None = None
) -> None:
    """Write a population as prompt JSONL (and optionally its geo lookup) for trace round-trips."""
    with Path(prompts_path).open("w", encoding="utf-8") as f:
        for item in items:
            at_ms = None if item.at_us is None else item.at_us / 1000
            f.write(PromptRecord(prompt=item.text, at_ms=at_ms).model_dump_json(exclude_none=True) + "\n")
    if lookup_path is not None:
        GeoLookup({item.text_hash: item.origin for item in items}).to_jsonl(lookup_path)


def dump_stream_csv(arrivals: Sequence[Arrival], path: str | Path) -> None:
    """Debug dump: ``arrival_us,prompt_hash,origin_lat,origin_lon,token_count``."""
    lines = ["arrival_us,prompt_hash,origin_lat,origin_lon,token_count"]
    lines.extend(
        f"{a.at_us},{a.prompt.text_hash},{a.prompt.origin.lat!r},{a.prompt.origin.lon!r},{len(a.prompt.tokens)}"
        for a in arrivals
    )
    Path(path).write_text("\n".join(lines) + "\n")


def build_stream(spec: WorkloadSpec, duration_s: float, seed: int, base_dir: Path | None = None) -> ArrivalStream:
    """Arrival stream for a non-sweep workload spec."""
    source = resolve_source_paths(spec.source, base_dir)
    seed = spec.seed if spec.seed is not None else seed
    shape = spec.shape
    match shape:
        case ConcurrentShape():
            return gen_concurrent(shape.n, duration_s, source, seed, spec.output_tokens)
        case PoissonShape():
            return gen_poisson(shape.rate, duration_s, source, seed, spec.output_tokens)
        case ThroughputShape():
            return gen_throughput(duration_s, source, seed, shape.ceiling, spec.output_tokens)
        case ReplayShape():
            if not isinstance(source, TraceSource):
                raise ValueError("replay workloads need a trace source")
            return gen_replay(source, duration_s, seed, spec.output_tokens)
        case SweepShape():
            raise ValueError("sweep workloads run stage by stage through run_sweep")
    raise AssertionError(f"unhandled workload shape {shape!r}")  # pragma: no cover


def resolve_source_paths(
    source: SyntheticSource | TraceSource, base_dir: Path | None
) -> SyntheticSource | TraceSource:
    if isinstance(source, TraceSource) and base_dir is not None:
        return source.model_copy(
            update={"prompts": base_dir / source.prompts, "geolookup": base_dir / source.geolookup}
        )
    return source
