"""Site geometry, wind records and time windows shared by every stage."""

from __future__ import annotations

import datetime as dt
import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MINUTE = np.timedelta64(60, "s")


def as_time(value) -> np.datetime64:
    """Coerce a timestamp-like value to ``datetime64[s]`` (naive UTC)."""
    if isinstance(value, np.datetime64):
        return value.astype("datetime64[s]")
    if hasattr(value, "tzinfo") and value.tzinfo is not None:
        value = value.astimezone(dt.timezone.utc).replace(tzinfo=None)
    if isinstance(value, str) and value.endswith("Z"):
        value = value[:-1]
    return np.datetime64(value, "s")


@dataclass(frozen=True)
class SourceSpec:
    id: str
    x: float
    y: float
    H: float

    def __post_init__(self):
        if self.H < 0:
            raise ValueError(f"source {self.id!r}: release height must be >= 0")


@dataclass(frozen=True)
class SensorSpec:
    id: str
    x: float
    y: float
    z: float
    has_anemometer: bool = False

    def __post_init__(self):
        if self.z < 0:
            raise ValueError(f"sensor {self.id!r}: height must be >= 0")


@dataclass(frozen=True)
class WindRecord:
    """One minute of wind. ``direction`` is where the wind blows *from*, degrees."""

    timestamp: np.datetime64
    speed: float
    direction: float

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("wind speed must be >= 0")
        if not 0.0 <= self.direction < 360.0:
            raise ValueError("wind direction must lie in [0, 360)")


@dataclass(frozen=True)
class TimeWindow:
    """Half-open interval ``[start, end)`` on the minute grid."""

    start: np.datetime64
    end: np.datetime64

    def __post_init__(self):
        object.__setattr__(self, "start", as_time(self.start))
        object.__setattr__(self, "end", as_time(self.end))
        if self.end < self.start:
            raise ValueError("window end precedes start")
        if (self.end - self.start) % MINUTE:
            raise ValueError("window length must be a whole number of minutes")

    @property
    def n_minutes(self) -> int:
        return int((self.end - self.start) // MINUTE)

    @property
    def minutes(self) -> np.ndarray:
        return self.start + MINUTE * np.arange(self.n_minutes)

    @property
    def id(self) -> int:
        """Minutes since the Unix epoch of the window start; stable under deletion of other windows."""
        return int(self.start.astype("datetime64[m]").astype(np.int64))

    @property
    def hours(self) -> float:
        return self.n_minutes / 60.0


def check_unique(ids: Sequence[str], what: str) -> None:
    seen = set()
    for i in ids:
        if i in seen:
            raise ValueError(f"duplicate {what} id {i!r}")
        seen.add(i)


@dataclass(frozen=True)
class Layout:
    """Row layout of ``y`` and ``X``: sensor-major blocks of ``minutes``.

    Row ``k * l + t`` is sensor ``sensor_ids[k]`` at ``minutes[t]``.
    """

    sensor_ids: tuple[str, ...]
    minutes: np.ndarray = field(compare=False)

    @property
    def l(self) -> int:
        return len(self.minutes)

    @property
    def m(self) -> int:
        return len(self.sensor_ids)

    @property
    def n(self) -> int:
        return self.l * self.m

    def rows(self) -> list[tuple[str, np.datetime64]]:
        return [(s, t) for s in self.sensor_ids for t in self.minutes]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update("\x1f".join(self.sensor_ids).encode())
        h.update(np.asarray(self.minutes, dtype="datetime64[s]").astype(np.int64).tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        return isinstance(other, Layout) and self.digest() == other.digest()

    def __hash__(self):
        return hash(self.digest())
