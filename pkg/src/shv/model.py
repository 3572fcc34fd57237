"""Core domain types: topics, sensor ids, readings, units and metadata.

A sensor is named by a slash-separated topic.  Each topic component is
mapped to a per-level ordinal and the ordinals are packed into a 128-bit
sensor id (SID): 8 levels of 16 bits, level 0 in the most significant
bits, 0 meaning "level absent".  Topics that share a prefix therefore
share the high bits of their SIDs.
"""

from __future__ import annotations

import functools
import os
import re
import threading
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, NamedTuple

from .errors import (
    DimensionMismatch,
    LevelExhausted,
    MalformedTopic,
    NoncontiguousLevels,
    UnknownOrdinal,
    UnknownUnit,
)

MAX_LEVELS = 8
LEVEL_BITS = 16
MAX_ORDINAL = (1 << LEVEL_BITS) - 1
MAX_TOPIC_BYTES = 255

_COMPONENT_RE = re.compile(r"[A-Za-z0-9_.\-]+\Z")


@dataclass(frozen=True)
class Topic:
    components: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if not 1 <= len(comps) <= MAX_LEVELS:
            raise MalformedTopic(f"topic needs 1..{MAX_LEVELS} components, got {len(comps)}")
        for c in comps:
            if not isinstance(c, str) or not _COMPONENT_RE.match(c):
                raise MalformedTopic(f"bad topic component {c!r}")
        if len(str(self).encode()) > MAX_TOPIC_BYTES:
            raise MalformedTopic("topic longer than 255 bytes")

    def __str__(self):
        return "/" + "/".join(self.components)

    def __len__(self):
        return len(self.components)

    def child(self, *names) -> Topic:
        return Topic(self.components + tuple(names))


def parse_topic(text) -> Topic:
    if isinstance(text, Topic):
        return text
    if not isinstance(text, str) or not text.startswith("/"):
        raise MalformedTopic(f"topic must start with '/': {text!r}")
    if len(text.encode()) > MAX_TOPIC_BYTES:
        raise MalformedTopic("topic longer than 255 bytes")
    return Topic(tuple(text[1:].split("/")))


class SensorId(int):
    """128-bit SID; an ``int`` with level accessors."""

    def __new__(cls, value=0):
        value = int(value)
        if not 0 <= value < (1 << (LEVEL_BITS * MAX_LEVELS)):
            raise ValueError("SID out of 128-bit range")
        return super().__new__(cls, value)

    @classmethod
    def from_levels(cls, ordinals: Iterable[int]) -> SensorId:
        ordinals = list(ordinals)
        if len(ordinals) > MAX_LEVELS:
            raise ValueError("too many levels")
        value = 0
        for i in range(MAX_LEVELS):
            o = ordinals[i] if i < len(ordinals) else 0
            if not 0 <= o <= MAX_ORDINAL:
                raise ValueError(f"ordinal {o} out of range")
            value = (value << LEVEL_BITS) | o
        return cls(value)

    def levels(self) -> tuple:
        shift = LEVEL_BITS * (MAX_LEVELS - 1)
        return tuple((int(self) >> (shift - LEVEL_BITS * i)) & MAX_ORDINAL for i in range(MAX_LEVELS))

    def level(self, i: int) -> int:
        return (int(self) >> (LEVEL_BITS * (MAX_LEVELS - 1 - i))) & MAX_ORDINAL

    def hex(self) -> str:
        return f"{int(self):032x}"

    @classmethod
    def fromhex(cls, text: str) -> SensorId:
        return cls(int(text, 16))

    def __repr__(self):
        return f"SensorId(0x{self.hex()})"


class SensorReading(NamedTuple):
    sid: SensorId
    timestamp: int
    value: int


class LevelDictionary:
    """Per-level component-name <-> ordinal maps backing the topic/SID codec.

    Lookups are lock-free; registrations are serialized by a lock and
    become visible atomically (the reverse map is filled first).
    """

    def __init__(self):
        self._by_name = [dict() for _ in range(MAX_LEVELS)]
        self._by_ordinal = [dict() for _ in range(MAX_LEVELS)]
        self._lock = threading.Lock()
        self.dirty = False

    def __len__(self):
        return sum(len(m) for m in self._by_name)

    def ordinal(self, level: int, name: str):
        return self._by_name[level].get(name)

    def name(self, level: int, ordinal: int):
        return self._by_ordinal[level].get(ordinal)

    def _register(self, level, name):
        ordinal = self._by_name[level].get(name)
        if ordinal is not None:
            return ordinal
        ordinal = len(self._by_name[level]) + 1
        if ordinal > MAX_ORDINAL:
            raise LevelExhausted(f"level {level} already holds {MAX_ORDINAL} names")
        self._by_ordinal[level][ordinal] = name
        self._by_name[level][name] = ordinal
        self.dirty = True
        return ordinal

    def lookup(self, topic: Topic):
        """Return the SID of an already-registered topic, or None."""
        ords = []
        for level, comp in enumerate(topic.components):
            o = self._by_name[level].get(comp)
            if o is None:
                return None
            ords.append(o)
        return SensorId.from_levels(ords)

    def encode(self, topic: Topic) -> SensorId:
        sid = self.lookup(topic)
        if sid is not None:
            return sid
        with self._lock:
            ords = [self._register(level, comp) for level, comp in enumerate(topic.components)]
        return SensorId.from_levels(ords)

    def decode(self, sid: SensorId) -> Topic:
        levels = SensorId(sid).levels()
        comps = []
        ended = False
        for level, o in enumerate(levels):
            if o == 0:
                ended = True
                continue
            if ended:
                raise NoncontiguousLevels(f"level {level} populated after an absent level")
            name = self._by_ordinal[level].get(o)
            if name is None:
                raise UnknownOrdinal(f"ordinal {o} not registered at level {level}")
            comps.append(name)
        if not comps:
            raise NoncontiguousLevels("SID has no populated levels")
        return Topic(tuple(comps))

    # persistence: one "<level>\t<ordinal>\t<name>" line per entry
    def dumps(self) -> str:
        lines = []
        for level in range(MAX_LEVELS):
            for ordinal in sorted(self._by_ordinal[level]):
                lines.append(f"{level}\t{ordinal}\t{self._by_ordinal[level][ordinal]}\n")
        return "".join(lines)

    @classmethod
    def loads(cls, text: str) -> LevelDictionary:
        d = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            try:
                level, ordinal, name = line.split("\t")
                level, ordinal = int(level), int(ordinal)
            except ValueError:
                raise ValueError(f"dictionary line {lineno} malformed: {line!r}") from None
            if name in d._by_name[level] or ordinal in d._by_ordinal[level]:
                raise ValueError(f"dictionary line {lineno} duplicates an entry")
            d._by_name[level][name] = ordinal
            d._by_ordinal[level][ordinal] = name
        for level in range(MAX_LEVELS):
            if sorted(d._by_ordinal[level]) != list(range(1, len(d._by_ordinal[level]) + 1)):
                raise ValueError(f"dictionary ordinals at level {level} are not dense")
        return d

    def save(self, path):
        with self._lock:
            text = self.dumps()
            self.dirty = False
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> LevelDictionary:
        if not os.path.exists(path):
            return cls()
        with open(path, encoding="utf-8", newline="\n") as fh:
            return cls.loads(fh.read())


def encode_sid(topic, dictionary: LevelDictionary) -> SensorId:
    return dictionary.encode(parse_topic(topic))


def decode_sid(sid, dictionary: LevelDictionary) -> Topic:
    return dictionary.decode(sid)


# -- units -------------------------------------------------------------------

DIMENSIONS = ("power", "energy", "temperature", "time", "bytes", "dimensionless")


@dataclass(frozen=True)
class Unit:
    symbol: str
    dimension: str
    factor: float

    def __str__(self):
        return self.symbol


UNITS = {
    u.symbol: u
    for u in (
        Unit("W", "power", 1.0),
        Unit("mW", "power", 1e-3),
        Unit("kW", "power", 1e3),
        Unit("MW", "power", 1e6),
        Unit("J", "energy", 1.0),
        Unit("kJ", "energy", 1e3),
        Unit("Wh", "energy", 3600.0),
        Unit("°C", "temperature", 1.0),
        Unit("s", "time", 1.0),
        Unit("ms", "time", 1e-3),
        Unit("us", "time", 1e-6),
        Unit("ns", "time", 1e-9),
        Unit("B", "bytes", 1.0),
        Unit("KB", "bytes", 1e3),
        Unit("MB", "bytes", 1e6),
        Unit("GB", "bytes", 1e9),
        Unit("", "dimensionless", 1.0),
    )
}
_FACTORS = {
    "W": Fraction(1), "mW": Fraction(1, 1000), "kW": Fraction(1000), "MW": Fraction(10**6),
    "J": Fraction(1), "kJ": Fraction(1000), "Wh": Fraction(3600),
    "°C": Fraction(1),
    "s": Fraction(1), "ms": Fraction(1, 10**3), "us": Fraction(1, 10**6), "ns": Fraction(1, 10**9),
    "B": Fraction(1), "KB": Fraction(10**3), "MB": Fraction(10**6), "GB": Fraction(10**9),
    "": Fraction(1),
}
BASE_UNITS = {"power": "W", "energy": "J", "temperature": "°C", "time": "s", "bytes": "B", "dimensionless": ""}
_UNIT_ALIASES = {"C": "°C", "degC": "°C"}


def get_unit(symbol) -> Unit:
    if isinstance(symbol, Unit):
        return symbol
    symbol = _UNIT_ALIASES.get(symbol, symbol)
    try:
        return UNITS[symbol]
    except KeyError:
        raise UnknownUnit(f"unknown unit {symbol!r}") from None


def base_unit(dimension: str) -> Unit:
    return UNITS[BASE_UNITS[dimension]]


def convert(value: float, src, dst) -> float:
    src, dst = get_unit(src), get_unit(dst)
    if src.dimension != dst.dimension:
        raise DimensionMismatch(f"cannot convert {src.symbol or '(none)'} to {dst.symbol or '(none)'}")
    ratio = _ratio(src.symbol, dst.symbol)
    if ratio == 1:
        return float(value)
    # exact rational product, rounded once
    return float(Fraction(value) * ratio)


@functools.lru_cache(maxsize=None)
def _ratio(src: str, dst: str) -> Fraction:
    return _FACTORS[src] / _FACTORS[dst]


@dataclass(frozen=True)
class SensorMetadata:
    topic: Topic
    unit: Unit = UNITS[""]
    scale: float = 1.0
    interval_ns: int = 1_000_000_000
    ttl_ns: int = 0

    def __post_init__(self):
        object.__setattr__(self, "topic", parse_topic(self.topic))
        object.__setattr__(self, "unit", get_unit(self.unit))
        if self.scale == 0:
            raise ValueError("scale must be nonzero")
        if self.interval_ns <= 0:
            raise ValueError("interval_ns must be positive")
        if self.ttl_ns < 0:
            raise ValueError("ttl_ns must be >= 0")


def scaled(reading, meta: SensorMetadata) -> float:
    value = reading.value if hasattr(reading, "value") else reading
    return value * meta.scale
