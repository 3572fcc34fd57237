"""Client-side query library over a store.

Queries take a topic, resolve it to a SID (or to a virtual-sensor
definition) and return time-ordered points, scaled by the sensor's
metadata unless raw values are asked for.  Integrals, derivatives and
CSV export/import work on these results.

CSV format (UTF-8, LF)::

    sensor,timestamp,value
    /r1/c1/n1/power,1000000000,42
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

from .errors import BadHeader, BadRow, InsufficientData, MalformedTopic, UnknownSensor
from .model import SensorMetadata, Unit, get_unit, parse_topic
from .storage import TS_MAX
from .vsensor import VSensorDef, VSensorEngine

CSV_HEADER = ["sensor", "timestamp", "value"]
NS = 1e9

_INTEGRAL_UNITS = {"W": "J", "kW": "kJ"}
_DERIVATIVE_UNITS = {"J": "W", "kJ": "kW"}


@dataclass
class QueryResult:
    topic: object
    points: list
    unit: Unit = get_unit("")
    raw: bool = False

    def __len__(self):
        return len(self.points)

    @property
    def timestamps(self):
        return [p[0] for p in self.points]

    @property
    def values(self):
        return [p[1] for p in self.points]


def integral_unit(unit: Unit) -> str:
    if unit.symbol in _INTEGRAL_UNITS:
        return _INTEGRAL_UNITS[unit.symbol]
    if unit.symbol == "":
        return "s"
    return f"{unit.symbol}*s"


def derivative_unit(unit: Unit) -> str:
    if unit.symbol in _DERIVATIVE_UNITS:
        return _DERIVATIVE_UNITS[unit.symbol]
    if unit.symbol == "":
        return "1/s"
    return f"{unit.symbol}/s"


class QueryClient:
    def __init__(self, store):
        self.store = store
        self.metadata = store.metadata
        self.engine = VSensorEngine(store, self.metadata)

    def fetch(self, topic, t0: int, t1: int, raw=False) -> QueryResult:
        topic = parse_topic(topic)
        entry = self.metadata.get(topic)
        if isinstance(entry, VSensorDef):
            points = self.engine.evaluate(topic, t0, t1)
            if raw:
                points = [(ts, int(round(v / entry.scale))) for ts, v in points]
            return QueryResult(topic, points, entry.unit, raw)
        sid = self.store.sid_of(topic)
        if sid is None and entry is None:
            raise UnknownSensor(f"unknown sensor {topic}")
        meta = entry if isinstance(entry, SensorMetadata) else SensorMetadata(topic)
        points = self.store.query(sid, max(t0, 0), min(t1, TS_MAX)) if sid is not None else []
        if not raw:
            scale = meta.scale
            points = [(ts, v * scale) for ts, v in points]
        return QueryResult(topic, points, meta.unit, raw)


def integral(result: QueryResult):
    """Trapezoidal integral over time in seconds; returns ``(value, unit)``."""
    pts = result.points
    if len(pts) < 2:
        raise InsufficientData("integral needs at least 2 points")
    total = math.fsum((pts[i][1] + pts[i + 1][1]) / 2 * ((pts[i + 1][0] - pts[i][0]) / NS)
                      for i in range(len(pts) - 1))
    return total, integral_unit(result.unit)


def derivative(result: QueryResult) -> QueryResult:
    """Finite differences per second, stamped at the later point of each pair."""
    pts = result.points
    if len(pts) < 2:
        raise InsufficientData("derivative needs at least 2 points")
    out = [(pts[i][0], (pts[i][1] - pts[i - 1][1]) / ((pts[i][0] - pts[i - 1][0]) / NS))
           for i in range(1, len(pts))]
    sym = derivative_unit(result.unit)
    try:
        unit = get_unit(sym)
    except KeyError:
        unit = Unit(sym, "dimensionless", 1.0)
    return QueryResult(result.topic, out, unit)


def _format_value(v):
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float) and v.is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def csv_export(results) -> str:
    if isinstance(results, QueryResult):
        results = [results]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in results:
        name = str(r.topic)
        for ts, v in r.points:
            w.writerow((name, ts, _format_value(v)))
    return buf.getvalue()


def csv_import(text: str, store) -> int:
    """Import raw readings; all-or-nothing.  Returns the number imported."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise BadHeader("empty input") from None
    if header != CSV_HEADER:
        raise BadHeader(f"expected header {','.join(CSV_HEADER)!r}, got {','.join(header)!r}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise BadRow(lineno, "expected 3 fields")
        try:
            topic = parse_topic(row[0])
            ts = int(row[1])
            value = int(row[2])
        except (MalformedTopic, ValueError) as exc:
            raise BadRow(lineno, str(exc)) from None
        if not 0 < ts < TS_MAX or not -(1 << 63) <= value < (1 << 63):
            raise BadRow(lineno, "timestamp or value out of range")
        rows.append((topic, ts, value))
    by_sid = {}
    for topic, ts, value in rows:
        sid = store.sid_of(topic, register=True)
        by_sid.setdefault(sid, []).append((ts, value))
    for sid, records in by_sid.items():
        store.insert_many(sid, records)
    store.flush()
    return len(rows)
