"""Persistent sensor and virtual-sensor metadata (``metadata.pt``).

::

    sensor /r1/c1/n1/power { unit W; scale 1.0; interval 1000; ttl 0 }
    vsensor /vs/heatratio { expr "<\\/cool\\/heat> / <\\/pdu\\/power>"; unit ""; interval 1000; scale 0.000001 }

Intervals, ttl and t-zero are written in milliseconds (decimal fractions
allowed) and held internally in nanoseconds.
"""

from __future__ import annotations

import os
import threading
from decimal import Decimal, InvalidOperation

from . import ptree
from .clock import NS_PER_MS
from .errors import ConfigError
from .model import SensorMetadata, parse_topic
from .vsensor import VSensorDef


def ms_to_ns(text) -> int:
    try:
        ns = Decimal(str(text).strip()) * NS_PER_MS
    except InvalidOperation:
        raise ConfigError(f"not a duration in ms: {text!r}") from None
    if ns != ns.to_integral_value():
        raise ConfigError(f"duration {text} ms is finer than 1 ns")
    return int(ns)


def ns_to_ms(ns: int) -> str:
    text = str(Decimal(ns) / NS_PER_MS)
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    return text


class MetadataStore:
    def __init__(self, path=None):
        self.path = path
        self._entries = {}
        self._lock = threading.Lock()
        if path and os.path.exists(path):
            self._load()

    def _load(self):
        root = ptree.load(self.path)
        for node in root.children:
            try:
                if node.key == "sensor":
                    entry = SensorMetadata(
                        node.value,
                        unit=node.get("unit", ""),
                        scale=float(node.get("scale", "1")),
                        interval_ns=ms_to_ns(node.get("interval", "1000")),
                        ttl_ns=ms_to_ns(node.get("ttl", "0")),
                    )
                elif node.key == "vsensor":
                    entry = VSensorDef(
                        node.value,
                        node.get("expr", ""),
                        unit=node.get("unit", ""),
                        interval_ns=ms_to_ns(node.get("interval", "1000")),
                        t_zero_ns=ms_to_ns(node.get("tzero", "0")),
                        scale=float(node.get("scale", "1")),
                    )
                else:
                    raise ConfigError(f"unknown metadata entry {node.key!r}")
            except (ValueError, SyntaxError) as exc:
                raise ConfigError(f"{self.path}: {node.key} {node.value}: {exc}") from exc
            self._entries[entry.topic] = entry

    def get(self, topic):
        return self._entries.get(parse_topic(topic))

    def __contains__(self, topic):
        return self.get(topic) is not None

    def __iter__(self):
        return iter(sorted(self._entries.values(), key=lambda e: str(e.topic)))

    def sensors(self):
        return [e for e in self if isinstance(e, SensorMetadata)]

    def vsensors(self):
        return [e for e in self if isinstance(e, VSensorDef)]

    def put(self, entry):
        with self._lock:
            self._entries[entry.topic] = entry
            self.save()

    def remove(self, topic):
        with self._lock:
            self._entries.pop(parse_topic(topic), None)
            self.save()

    def dumps(self) -> str:
        nodes = []
        for e in self:
            if isinstance(e, SensorMetadata):
                nodes.append(ptree.Node("sensor", str(e.topic), [
                    ptree.Node("unit", e.unit.symbol),
                    ptree.Node("scale", repr(e.scale)),
                    ptree.Node("interval", ns_to_ms(e.interval_ns)),
                    ptree.Node("ttl", ns_to_ms(e.ttl_ns)),
                ]))
            else:
                nodes.append(ptree.Node("vsensor", str(e.topic), [
                    ptree.Node("expr", e.expr_text),
                    ptree.Node("unit", e.unit.symbol),
                    ptree.Node("interval", ns_to_ms(e.interval_ns)),
                    ptree.Node("tzero", ns_to_ms(e.t_zero_ns)),
                    ptree.Node("scale", repr(e.scale)),
                ]))
        return ptree.dumps(ptree.Node("", "", nodes))

    def save(self):
        if not self.path:
            return
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())
        os.replace(tmp, self.path)
