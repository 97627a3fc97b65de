"""Geo-proximal ingress: prompt hashing, hash -> coordinates lookup, nearest region by haversine distance."""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from geokv._logger import logger
from geokv.errors import ConfigError, TraceParseError

EARTH_RADIUS_KM = 6371.0
"""Mean Earth radius; fixed so golden distances stay stable."""

FNV64_OFFSET_BASIS = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class GeoPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    lat: float = Field(ge=-90, le=90)
    lon: float = Field(ge=-180, le=180)


class GeoLookupRecord(BaseModel):
    """One line of a lookup file: ``{"hash": <u64>, "lat": <float>, "lon": <float>}``."""

    hash: int = Field(ge=0, le=_MASK64)
    lat: float = Field(ge=-90, le=90)
    lon: float = Field(ge=-180, le=180)


class ResolvedOrigin(BaseModel):
    model_config = ConfigDict(frozen=True)

    point: GeoPoint
    fallback: bool = False


class GeoLookup:
    """Immutable prompt-hash -> origin table."""

    def __init__(self, entries: Mapping[int, GeoPoint] | None = None) -> None:
        self._entries: dict[int, GeoPoint] = dict(entries or {})

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, prompt_hash: object) -> bool:
        return prompt_hash in self._entries

    def get(self, prompt_hash: int) -> GeoPoint | None:
        return self._entries.get(prompt_hash)

    def records(self) -> list[GeoLookupRecord]:
        return [GeoLookupRecord(hash=h, lat=p.lat, lon=p.lon) for h, p in sorted(self._entries.items())]

    @classmethod
    def from_jsonl(cls, path: str | Path) -> GeoLookup:
        """Load a lookup file; malformed lines raise TraceParseError with the line number."""
        entries: dict[int, GeoPoint] = {}
        with Path(path).open(encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = GeoLookupRecord.model_validate_json(line)
                except ValidationError as e:
                    logger.error(f"Malformed geo lookup line {path}:{line_no}")
                    raise TraceParseError(str(path), line_no, str(e)) from e
                entries[record.hash] = GeoPoint(lat=record.lat, lon=record.lon)
        logger.info(f"Loaded {len(entries)} geo lookup entries from {path}")
        return cls(entries)

    def to_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as f:
            for record in self.records():
                f.write(record.model_dump_json() + "\n")


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a."""
    h = FNV64_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def prompt_hash(prompt: str) -> int:
    """Hash used as the lookup key for a prompt: FNV-1a over its UTF-8 bytes."""
    return fnv1a_64(prompt.encode("utf-8"))


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in kilometres."""
    lat1 = math.radians(a.lat)
    lat2 = math.radians(b.lat)
    dlat = lat2 - lat1
    dlon = math.radians(b.lon) - math.radians(a.lon)
    sin_lat = math.sin(dlat * 0.5)
    sin_lon = math.sin(dlon * 0.5)
    c = sin_lat * sin_lat + math.cos(lat1) * math.cos(lat2) * sin_lon * sin_lon
    c = min(max(c, 0.0), 1.0)
    return 2 * EARTH_RADIUS_KM * math.asin(math.sqrt(c))


def nearest_region(origin: GeoPoint, regions: Sequence[tuple[str, GeoPoint]]) -> str:
    """Region closest to ``origin``; equal distances go to the lexicographically smallest id.

    Raises:
        ConfigError: If ``regions`` is empty.
    """
    if not regions:
        raise ConfigError("nearest_region needs at least one region")
    return min(regions, key=lambda item: (haversine_km(origin, item[1]), item[0]))[0]


def resolve_origin(prompt_hash: int, lookup: GeoLookup, fallback: GeoPoint) -> ResolvedOrigin:
    """Origin of a prompt, or ``fallback`` flagged as such when the hash is unknown."""
    point = lookup.get(prompt_hash)
    if point is None:
        logger.debug(f"Hash {prompt_hash} missing from geo lookup, using fallback origin")
        return ResolvedOrigin(point=fallback, fallback=True)
    return ResolvedOrigin(point=point)


def build_lookup(prompts: Iterable[tuple[str, GeoPoint]]) -> GeoLookup:
    """Lookup table keyed by the hash of each prompt."""
    return GeoLookup({prompt_hash(text): point for text, point in prompts})
