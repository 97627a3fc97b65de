"""Exception hierarchy."""

from __future__ import annotations


class GeoKVError(Exception):
    """Base class for every error raised by geokv."""


class ConfigError(GeoKVError, ValueError):
    """A config document or a configuration argument is invalid."""


class InsufficientDataError(GeoKVError, ValueError):
    """Fewer samples than a fit needs."""


class DegenerateDesignError(GeoKVError, ValueError):
    """Regression design matrix is singular (all x identical)."""


class CorruptOverlapError(GeoKVError, ValueError):
    """A prefix-overlap estimate exceeds the prompt length."""


class NoPeerAvailableError(GeoKVError, RuntimeError):
    """No candidate region is eligible for selection."""


class AllRegionsSaturatedError(GeoKVError, RuntimeError):
    """Every region's queue is full; the central proxy has to back off and retry."""


class TraceParseError(GeoKVError, ValueError):
    """A JSONL input line could not be parsed."""

    def __init__(self, path: str, line_no: int, reason: str) -> None:
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no


class TraceCorruptionError(GeoKVError, RuntimeError):
    """Request-trace timestamps violate the ordering invariants."""


class ConfigMismatchError(GeoKVError, ValueError):
    """Reports being compared were produced from different configurations."""

    def __init__(self, digests: dict[str, str]) -> None:
        diff = ", ".join(f"{label}={digest[:12]}" for label, digest in sorted(digests.items()))
        super().__init__(f"Reports differ in more than strategy: {diff}")
        self.digests = digests
