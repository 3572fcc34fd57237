"""Built-in data-source plugins and the procfs/sysfs text parsers.

A plugin turns its config block into groups of sensors and, on each
tick, reads one group collectively.  ``read_group`` returns a mapping
sensor name -> raw integer; sensors missing from the mapping failed to
read on this tick.

Config blocks (paths are relative to the entity's ``basedir``)::

    plugin tester   { group g1 { interval 1000; sensors 100 } }
    plugin procfile { entity host { basedir /proc }
                      group mem { interval 1000; entity host; path meminfo; type meminfo } }
    plugin sysfile  { group temp { interval 1000
                          sensor cpu0 { path /sys/class/hwmon/hwmon0/temp1_input } } }
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

from .clock import NS_PER_MS
from .errors import ConfigError, NotNumeric, Unreadable
from .model import Topic, parse_topic

_BAD_CHARS = re.compile(r"[^A-Za-z0-9_.\-]")


def sanitize(name: str) -> str:
    """Map an arbitrary metric name onto the topic-component charset."""
    return _BAD_CHARS.sub("_", name) or "_"


# -- parsers -------------------------------------------------------------------

def _int(text):
    try:
        return int(text)
    except ValueError:
        return None


def parse_meminfo(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        key, sep, rest = line.partition(":")
        if not sep or not key.strip():
            continue
        fields = rest.split()
        if len(fields) == 2 and fields[1] == "kB" or len(fields) == 1:
            value = _int(fields[0])
            if value is not None:
                out[key.strip()] = value
    return out


def parse_vmstat(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        fields = line.split()
        if len(fields) != 2:
            continue
        value = _int(fields[1])
        if value is not None:
            out[fields[0]] = value
    return out


PROCSTAT_CPU_FIELDS = ("user", "nice", "system", "idle", "iowait", "irq", "softirq")


def parse_procstat(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        fields = line.split()
        if not fields:
            continue
        key = fields[0]
        if key.startswith("cpu") and (key == "cpu" or key[3:].isdigit()):
            for name, raw in zip(PROCSTAT_CPU_FIELDS, fields[1:]):
                value = _int(raw)
                if value is None:
                    break
                out[f"{key}.{name}"] = value
        elif key in ("ctxt", "processes") and len(fields) >= 2:
            value = _int(fields[1])
            if value is not None:
                out[key] = value
    return out


PARSERS = {"meminfo": parse_meminfo, "vmstat": parse_vmstat, "procstat": parse_procstat}

_LEADING_INT = re.compile(r"\s*([+-]?\d+)")


def sysfile_read(path) -> int:
    try:
        with open(path, "r") as fh:
            text = fh.read(4096)
    except (OSError, UnicodeDecodeError) as exc:
        raise Unreadable(f"cannot read {path}: {exc}") from exc
    m = _LEADING_INT.match(text)
    if not m:
        raise NotNumeric(f"{path}: {text[:32]!r} is not numeric")
    return int(m.group(1))


# -- plugin definitions ----------------------------------------------------------

@dataclass
class SensorDef:
    name: str
    topic: Topic
    active: bool = True
    params: dict = field(default_factory=dict)


@dataclass
class EntityDef:
    name: str
    params: dict = field(default_factory=dict)


@dataclass
class GroupDef:
    name: str
    interval_ns: int
    sensors: list
    entity: EntityDef = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.interval_ns <= 0:
            raise ConfigError(f"group {self.name}: interval must be positive")
        if not self.sensors:
            raise ConfigError(f"group {self.name}: no sensors")


class Plugin:
    """Base class: subclasses build groups from config and read them."""

    kind = None

    def __init__(self, name: str, prefix: Topic):
        self.name = name
        self.prefix = prefix
        self.groups = []
        self.entities = {}

    # config
    def configure(self, block):
        self.entities = {}
        for node in block.all("entity"):
            self.entities[node.value] = EntityDef(node.value, {c.key: c.value for c in node.children})
        groups = []
        for node in block.all("group"):
            if not node.value:
                raise ConfigError(f"plugin {self.name}: group without a name")
            interval_ms = node.get_float("interval", 1000)
            entity = None
            if node.get("entity"):
                entity = self.entities.get(node.get("entity"))
                if entity is None:
                    raise ConfigError(f"group {node.value}: unknown entity {node.get('entity')}")
            group = GroupDef(
                node.value,
                int(round(interval_ms * NS_PER_MS)),
                self.build_sensors(node, entity),
                entity,
                {c.key: c.value for c in node.children if not c.children},
            )
            groups.append(group)
        topics = [s.topic for g in groups for s in g.sensors]
        if len(set(topics)) != len(topics):
            raise ConfigError(f"plugin {self.name}: duplicate sensor topics")
        self.groups = groups
        return groups

    def sensor_topic(self, group_name, sensor_name, node=None):
        if node is not None and node.get("mqtt"):
            return parse_topic(node.get("mqtt"))
        return self.prefix.child(sanitize(group_name), sanitize(sensor_name))

    def build_sensors(self, node, entity):
        raise NotImplementedError

    # runtime
    def start(self):
        pass

    def stop(self):
        pass

    def read_group(self, group: GroupDef) -> dict:
        raise NotImplementedError

    @staticmethod
    def resolve(entity, path):
        base = entity.params.get("basedir", "") if entity else ""
        return os.path.join(base, path) if base else path


class TesterPlugin(Plugin):
    """Synthetic sensors: the k-th reading of every sensor is k."""

    kind = "tester"

    def __init__(self, name, prefix):
        super().__init__(name, prefix)
        self.counters = {}

    def build_sensors(self, node, entity):
        count = node.get_int("sensors")
        if count is None or count <= 0:
            raise ConfigError(f"tester group {node.value}: 'sensors <count>' required")
        return [SensorDef(f"s{i}", self.sensor_topic(node.value, f"s{i}")) for i in range(count)]

    def configure(self, block):
        groups = super().configure(block)
        self.counters = {s.topic: 0 for g in groups for s in g.sensors}
        return groups

    def tester_read(self, sensor: SensorDef) -> int:
        value = self.counters.get(sensor.topic, 0) + 1
        self.counters[sensor.topic] = value
        return value

    def read_group(self, group):
        counters = self.counters
        out = {}
        for s in group.sensors:
            if s.active:
                v = counters[s.topic] + 1
                counters[s.topic] = v
                out[s.name] = v
        return out


class ProcfilePlugin(Plugin):
    kind = "procfile"

    def build_sensors(self, node, entity):
        ftype = node.get("type")
        if ftype not in PARSERS:
            raise ConfigError(f"procfile group {node.value}: type must be one of {sorted(PARSERS)}")
        path = node.get("path")
        if not path:
            raise ConfigError(f"procfile group {node.value}: 'path' required")
        metrics = [c.value for c in node.all("sensor")]
        if not metrics:
            # discover the metric set from the file as it is now
            try:
                with open(self.resolve(entity, path)) as fh:
                    metrics = list(PARSERS[ftype](fh.read()))
            except OSError as exc:
                raise ConfigError(f"procfile group {node.value}: {exc}") from exc
        return [SensorDef(m, self.sensor_topic(node.value, m)) for m in metrics]

    def read_group(self, group):
        path = self.resolve(group.entity, group.params["path"])
        try:
            with open(path) as fh:
                snapshot = PARSERS[group.params["type"]](fh.read())
        except (OSError, UnicodeDecodeError):
            return {}
        return {s.name: snapshot[s.name] for s in group.sensors if s.active and s.name in snapshot}


class SysfilePlugin(Plugin):
    kind = "sysfile"

    def build_sensors(self, node, entity):
        sensors = []
        for s in node.all("sensor"):
            if not s.get("path"):
                raise ConfigError(f"sysfile sensor {s.value}: 'path' required")
            sensors.append(SensorDef(s.value, self.sensor_topic(node.value, s.value, s), params={"path": s.get("path")}))
        if not sensors and node.get("path"):
            # shorthand: a group with a bare path is a single sensor named "value"
            sensors.append(SensorDef("value", self.sensor_topic(node.value, "value", node),
                                     params={"path": node.get("path")}))
        return sensors

    def read_group(self, group):
        out = {}
        for s in group.sensors:
            if not s.active:
                continue
            try:
                out[s.name] = sysfile_read(self.resolve(group.entity, s.params["path"]))
            except (Unreadable, NotNumeric):
                pass
        return out


PLUGIN_TYPES = {cls.kind: cls for cls in (TesterPlugin, ProcfilePlugin, SysfilePlugin)}
