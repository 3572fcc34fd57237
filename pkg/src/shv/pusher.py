"""The collection daemon.

A pusher hosts plugins, samples every sensor group on epoch-aligned
ticks, keeps the latest readings in per-sensor caches and periodically
publishes everything not yet sent to a collect agent.  Every pusher
sends at its own phase within the send interval so a fleet with
synchronized sampling does not hit the broker at the same instant.

Time is injected.  With a :class:`~shv.clock.SimClock` the daemon is
driven by :meth:`Pusher.run_until` and is fully deterministic; with the
real clock :meth:`Pusher.start` runs a scheduler thread, a sampler pool
and a sender thread.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import socket
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

from . import __version__, ptree, wire
from .clock import NS_PER_MS, NS_PER_S, RealClock
from .errors import (
    BrokerUnreachable,
    ConfigError,
    EmptyWindow,
    MalformedTopic,
    PluginStopped,
    ReloadFailed,
    UnknownPlugin,
    UnknownSensor,
)
from .model import Topic, parse_topic
from .plugins import PLUGIN_TYPES
from .rest import RestServer, split_address

log = logging.getLogger(__name__)

MIN_BACKOFF_NS = 1 * NS_PER_S
MAX_BACKOFF_NS = 60 * NS_PER_S
# keep each PUBLISH below the payload limit
MAX_RECORDS_PER_PUBLISH = wire.MAX_PAYLOAD // wire.RECORD_SIZE
SEND_CHUNK = 256 * 1024


def next_tick(now_ns: int, interval_ns: int) -> int:
    if interval_ns <= 0:
        raise ValueError("interval must be positive")
    return (now_ns // interval_ns + 1) * interval_ns


def hash64(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "big")


def send_phase(client_id: str, send_interval_ns: int) -> int:
    return hash64(client_id) % send_interval_ns


class PushedReading(NamedTuple):
    topic: Topic
    timestamp: int
    value: int


class SensorCache:
    """Time window of a sensor's newest readings plus a sent watermark.

    Entries older than ``newest - window_ns`` are evicted on insert.
    Evicting an entry that was never published counts as a drop.
    """

    def __init__(self, window_ns: int):
        self.window_ns = window_ns
        self.entries = deque()
        self.sent_ts = -1

    def __len__(self):
        return len(self.entries)

    def insert(self, ts: int, value: int) -> int:
        entries = self.entries
        entries.append((ts, value))
        horizon = ts - self.window_ns
        dropped = 0
        while entries[0][0] < horizon:
            old_ts, _ = entries.popleft()
            if old_ts > self.sent_ts:
                dropped += 1
        return dropped

    def unsent(self) -> list:
        if not self.entries or self.entries[-1][0] <= self.sent_ts:
            return []
        out = []
        for entry in reversed(self.entries):
            if entry[0] <= self.sent_ts:
                break
            out.append(entry)
        out.reverse()
        return out

    def newest(self):
        return self.entries[-1] if self.entries else None

    def average(self, window_ns: int) -> float:
        if not self.entries:
            raise EmptyWindow("no readings cached")
        window_ns = min(window_ns, self.window_ns)
        horizon = self.entries[-1][0] - window_ns
        values = [v for ts, v in self.entries if ts > horizon]
        if not values:
            raise EmptyWindow("no readings in window")
        return math.fsum(values) / len(values)


# -- transports ------------------------------------------------------------------

class TcpTransport:
    """MQTT client connection over TCP; blocking, QoS 0."""

    def __init__(self, address="127.0.0.1:1883", timeout=5.0):
        self.host, self.port = split_address(address, wire.DEFAULT_PORT)
        self.timeout = timeout
        self.sock = None

    @property
    def connected(self):
        return self.sock is not None

    def connect(self, client_id, keep_alive_s=wire.DEFAULT_KEEP_ALIVE):
        try:
            sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.sendall(wire.encode_packet(wire.Connect(client_id, keep_alive_s)))
            decoder = wire.StreamDecoder()
            packets = []
            while not packets:
                data = sock.recv(64)
                if not data:
                    raise ConnectionError("broker closed the connection")
                packets = decoder.feed(data)
        except (OSError, wire.ProtocolViolation) as exc:
            raise BrokerUnreachable(f"cannot connect to {self.host}:{self.port}: {exc}") from exc
        if not isinstance(packets[0], wire.ConnAck) or packets[0].code != 0:
            sock.close()
            raise BrokerUnreachable(f"broker refused connection: {packets[0]!r}")
        self.sock = sock

    def send(self, data: bytes):
        if self.sock is None:
            raise BrokerUnreachable("not connected")
        try:
            self.sock.sendall(data)
        except OSError as exc:
            self.close()
            raise BrokerUnreachable(str(exc)) from exc

    def close(self):
        if self.sock is not None:
            try:
                self.sock.sendall(wire.encode_packet(wire.Disconnect()))
            except OSError:
                pass
            self.sock.close()
            self.sock = None


class LoopbackTransport:
    """In-process transport straight into a collect agent session.

    The bytes still go through the wire codec and the agent's session
    rules.  ``available`` simulates the broker being up or down.
    """

    def __init__(self, agent):
        self.agent = agent
        self.session = None
        self.available = True

    @property
    def connected(self):
        return self.session is not None and not self.session.closed

    def connect(self, client_id, keep_alive_s=wire.DEFAULT_KEEP_ALIVE):
        if not self.available:
            raise BrokerUnreachable("broker down")
        self.session = self.agent.open_session()
        self.session.feed(wire.encode_packet(wire.Connect(client_id, keep_alive_s)))
        if self.session.closed:
            raise BrokerUnreachable("broker refused connection")

    def send(self, data: bytes):
        if not self.available or not self.connected:
            self.session = None
            raise BrokerUnreachable("broker down")
        self.session.feed(data)
        if self.session.closed:
            self.session = None
            raise BrokerUnreachable("session closed by broker")

    def close(self):
        if self.connected:
            self.session.feed(wire.encode_packet(wire.Disconnect()))
        self.session = None


# -- configuration ---------------------------------------------------------------

@dataclass
class PluginConfig:
    name: str
    kind: str
    source: str = None  # file the block is (re)read from
    block: object = None  # parsed block, used when there is no source file


@dataclass
class PusherConfig:
    broker: str = "127.0.0.1:1883"
    client_id: str = field(default_factory=lambda: f"pusher-{socket.gethostname()}")
    mqtt_prefix: Topic = field(default_factory=lambda: Topic(("shv",)))
    threads: int = 2
    send_interval_ns: int = NS_PER_S
    cache_window_ns: int = 120 * NS_PER_S
    keep_alive_s: int = wire.DEFAULT_KEEP_ALIVE
    rest_address: str = None
    plugins: list = field(default_factory=list)

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.send_interval_ns <= 0 or self.cache_window_ns <= 0:
            raise ConfigError("sendInterval and cacheWindow must be positive")

    @classmethod
    def from_file(cls, path) -> PusherConfig:
        return cls.from_tree(ptree.load(path), source=os.path.abspath(path))

    @classmethod
    def from_tree(cls, root, source=None) -> PusherConfig:
        g = root.child("global") or ptree.Node("global")
        kwargs = {}
        if g.get("broker"):
            kwargs["broker"] = g.get("broker")
        if g.get("clientId"):
            kwargs["client_id"] = g.get("clientId")
        if g.get("mqttprefix"):
            try:
                kwargs["mqtt_prefix"] = parse_topic(g.get("mqttprefix").rstrip("/"))
            except MalformedTopic as exc:
                raise ConfigError(str(exc)) from exc
        if g.get("restAddress"):
            kwargs["rest_address"] = g.get("restAddress")
        kwargs["threads"] = g.get_int("threads", 2)
        kwargs["send_interval_ns"] = int(g.get_float("sendInterval", 1000) * NS_PER_MS)
        kwargs["cache_window_ns"] = int(g.get_float("cacheWindow", 120_000) * NS_PER_MS)
        kwargs["keep_alive_s"] = g.get_int("keepAlive", wire.DEFAULT_KEEP_ALIVE)
        plugins = []
        for node in root.all("plugin"):
            kind = node.value
            if kind not in PLUGIN_TYPES:
                raise ConfigError(f"unknown plugin type {kind!r}")
            name = node.get("name", kind)
            plugins.append(PluginConfig(name, kind, source, node))
        kwargs["plugins"] = plugins
        return cls(**kwargs)


def _plugin_block(source, name):
    """Find the config block of plugin ``name`` in ``source``.

    A block may point at a separate file with ``config <file>``; that
    file then holds the plugin's entities and groups.
    """
    root = ptree.load(source)
    for node in root.all("plugin"):
        if node.get("name", node.value) == name:
            if node.get("config"):
                path = os.path.join(os.path.dirname(source), node.get("config"))
                return node.value, ptree.load(path)
            return node.value, node
    raise ConfigError(f"plugin {name} not found in {source}")


# -- daemon ----------------------------------------------------------------------

class GroupState:
    __slots__ = ("group", "next_tick", "overruns", "lock")

    def __init__(self, group, next_tick_ns):
        self.group = group
        self.next_tick = next_tick_ns
        self.overruns = 0
        self.lock = threading.Lock()


class PluginHost:
    def __init__(self, cfg: PluginConfig, plugin, now_ns):
        self.cfg = cfg
        self.plugin = plugin
        self.running = True
        self.read_errors = 0
        self.states = [GroupState(g, next_tick(now_ns, g.interval_ns)) for g in plugin.groups]

    @property
    def name(self):
        return self.cfg.name


class Pusher:
    def __init__(self, config: PusherConfig, clock=None, transport=None, plugins=None):
        self.config = config
        self.clock = clock or RealClock()
        self.transport = transport if transport is not None else TcpTransport(config.broker)
        self.phase_ns = send_phase(config.client_id, config.send_interval_ns)
        self.caches = {}
        self.hosts = {}
        self.stats = dict.fromkeys(
            ("sampled", "read_errors", "overruns", "dropped", "published", "publishes",
             "connect_failures"), 0)
        self._cache_lock = threading.Lock()
        self._retired = []
        self._control_lock = threading.RLock()
        self._send_lock = threading.Lock()
        self._backoff_ns = MIN_BACKOFF_NS
        self._reconnect_at = 0
        self._last_send = None
        self._stop = threading.Event()
        self._threads = []
        self._pool = None
        self.rest = None
        now = self.clock.now_ns()
        self.next_send = self._next_send_after(now)
        for pc in config.plugins:
            if pc.source:
                kind, block = _plugin_block(pc.source, pc.name)
            else:
                kind, block = pc.kind, pc.block
            self.add_plugin(pc, self._build_plugin(kind, pc.name, block))
        for pc, plugin in plugins or ():
            self.add_plugin(pc, plugin)

    # -- plugins
    def _build_plugin(self, kind, name, block):
        plugin = PLUGIN_TYPES[kind](name, self.config.mqtt_prefix)
        plugin.configure(block)
        return plugin

    def add_plugin(self, pc: PluginConfig, plugin):
        with self._control_lock:
            if pc.name in self.hosts:
                raise ConfigError(f"duplicate plugin {pc.name}")
            self._check_topics(plugin, exclude=None)
            host = PluginHost(pc, plugin, self.clock.now_ns())
            plugin.start()
            with self._cache_lock:
                for g in plugin.groups:
                    for s in g.sensors:
                        self.caches[s.topic] = SensorCache(self.config.cache_window_ns)
            self.hosts[pc.name] = host
            return host

    def _check_topics(self, plugin, exclude):
        taken = {s.topic for name, h in self.hosts.items() if name != exclude
                 for g in h.plugin.groups for s in g.sensors}
        for g in plugin.groups:
            for s in g.sensors:
                if s.topic in taken:
                    raise ConfigError(f"sensor topic {s.topic} used by another plugin")

    def plugin_control(self, name, action):
        with self._control_lock:
            host = self.hosts.get(name)
            if host is None:
                raise UnknownPlugin(name)
            now = self.clock.now_ns()
            if action == "stop":
                if host.running:
                    host.running = False
                    host.plugin.stop()
            elif action == "start":
                if not host.running:
                    for st in host.states:
                        st.next_tick = next_tick(now, st.group.interval_ns)
                    host.plugin.start()
                    host.running = True
            elif action == "reload":
                self._reload(host, now)
            else:
                raise ValueError(f"unknown action {action!r}")
            return "running" if host.running else "stopped"

    def _reload(self, host, now):
        try:
            if host.cfg.source is None:
                raise ConfigError("plugin has no config file")
            kind, block = _plugin_block(host.cfg.source, host.name)
            if kind != host.cfg.kind:
                raise ConfigError(f"plugin {host.name} changed type")
            plugin = self._build_plugin(kind, host.name, block)
            self._check_topics(plugin, exclude=host.name)
        except (ConfigError, OSError) as exc:
            raise ReloadFailed(f"reload of {host.name} failed: {exc}") from exc
        old = {s.topic for g in host.plugin.groups for s in g.sensors}
        new = {s.topic for g in plugin.groups for s in g.sensors}
        states = [GroupState(g, next_tick(now, g.interval_ns)) for g in plugin.groups]
        old_states = host.states
        for st in old_states:
            st.lock.acquire()
        try:
            host.plugin.stop()
            with self._cache_lock:
                for topic in old - new:
                    cache = self.caches.pop(topic, None)
                    if cache is not None and cache.unsent():
                        # readings already sampled still go out with the next flush
                        self._retired.append((topic, cache))
                for topic in new - old:
                    self.caches[topic] = SensorCache(self.config.cache_window_ns)
            host.plugin = plugin
            host.states = states
            if host.running:
                plugin.start()
        finally:
            for st in old_states:
                st.lock.release()

    # -- sampling
    def sample_group(self, host: PluginHost, state: GroupState, tick: int) -> list:
        if not host.running:
            raise PluginStopped(host.name)
        group = state.group
        values = host.plugin.read_group(group)
        out = []
        errors = 0
        for s in group.sensors:
            if not s.active:
                continue
            v = values.get(s.name)
            if v is None:
                errors += 1
            else:
                out.append(PushedReading(s.topic, tick, v))
        if errors:
            host.read_errors += errors
            self.stats["read_errors"] += errors
        return out

    def _store(self, readings):
        dropped = 0
        with self._cache_lock:
            caches = self.caches
            for r in readings:
                cache = caches.get(r.topic)
                if cache is not None:
                    dropped += cache.insert(r.timestamp, r.value)
            self.stats["sampled"] += len(readings)
            self.stats["dropped"] += dropped

    def _run_group(self, host, state, tick):
        with state.lock:
            if state not in host.states:
                return  # swapped out by a reload
            virtual = getattr(self.clock, "virtual", False)
            before = self.clock.now_ns()
            try:
                readings = self.sample_group(host, state, tick)
            except PluginStopped:
                return
            except Exception:
                log.exception("group %s/%s failed", host.name, state.group.name)
                readings = []
            self._store(readings)
            after = self.clock.now_ns()
            interval = state.group.interval_ns
            late = tick + (after - before) if virtual else after
            nxt = tick + interval
            if late >= nxt:
                state.overruns += 1
                self.stats["overruns"] += 1
                nxt = next_tick(late, interval)
            state.next_tick = nxt

    def _due_groups(self, t):
        with self._control_lock:
            return [(h, st) for h in self.hosts.values() if h.running
                    for st in h.states if st.next_tick <= t]

    def _next_sample_time(self):
        with self._control_lock:
            ticks = [st.next_tick for h in self.hosts.values() if h.running for st in h.states]
        return min(ticks) if ticks else None

    def _next_send_after(self, now):
        return next_tick(now - self.phase_ns, self.config.send_interval_ns) + self.phase_ns

    def run_until(self, t_ns: int):
        """Process every sampling tick and send slot up to and including ``t_ns``."""
        while True:
            ns = self._next_sample_time()
            event = min(x for x in (ns, self.next_send) if x is not None)
            if event > t_ns:
                break
            self.clock.sleep_until(event)
            if ns is not None and ns <= self.next_send:
                for host, state in self._due_groups(ns):
                    if state.next_tick == ns:
                        self._run_group(host, state, ns)
            else:
                self.flush(event)
                self.next_send = self._next_send_after(event)

    # -- sending
    def _ensure_connected(self, now):
        if self.transport.connected:
            return True
        if now < self._reconnect_at:
            return False
        try:
            self.transport.connect(self.config.client_id, self.config.keep_alive_s)
        except BrokerUnreachable as exc:
            self.stats["connect_failures"] += 1
            self._reconnect_at = now + self._backoff_ns
            self._backoff_ns = min(self._backoff_ns * 2, MAX_BACKOFF_NS)
            log.warning("broker unreachable, retry in %.0f s: %s", self._backoff_ns / 2 / NS_PER_S, exc)
            return False
        self._backoff_ns = MIN_BACKOFF_NS
        self._last_send = now
        return True

    def flush(self, now=None) -> list:
        """Publish every unsent cached reading, one PUBLISH per sensor."""
        now = self.clock.now_ns() if now is None else now
        sent = []
        with self._send_lock:
            if not self._ensure_connected(now):
                return sent
            with self._cache_lock:
                pending = [(topic, cache, cache.unsent())
                           for topic, cache in list(self.caches.items()) + self._retired]
            buf = bytearray()
            marks = []
            try:
                for topic, cache, records in pending:
                    name = str(topic)
                    for i in range(0, len(records), MAX_RECORDS_PER_PUBLISH):
                        chunk = records[i:i + MAX_RECORDS_PER_PUBLISH]
                        packet = wire.Publish(name, wire.encode_payload(chunk))
                        buf += wire.encode_packet(packet)
                        marks.append((packet, cache, chunk[-1][0], len(chunk)))
                        if len(buf) >= SEND_CHUNK:
                            sent += self._send_marked(buf, marks)
                            buf, marks = bytearray(), []
                if buf:
                    sent += self._send_marked(buf, marks)
                if not sent and now - self._last_send >= self.config.keep_alive_s * NS_PER_S // 2:
                    self.transport.send(wire.encode_packet(wire.PingReq()))
                    self._last_send = now
                if sent:
                    self._last_send = now
            except BrokerUnreachable:
                self._reconnect_at = now + self._backoff_ns
                log.warning("lost broker connection during flush")
            with self._cache_lock:
                self._retired = [(t, c) for t, c in self._retired if c.unsent()]
        return sent

    def _send_marked(self, buf, marks):
        """Send a run of packets, then advance the sent watermarks they cover."""
        self.transport.send(bytes(buf))
        with self._cache_lock:
            for _, cache, last_ts, n in marks:
                cache.sent_ts = max(cache.sent_ts, last_ts)
                self.stats["published"] += n
            self.stats["publishes"] += len(marks)
        return [m[0] for m in marks]

    # -- cache access
    def cache_average(self, topic, window_ns: int) -> float:
        topic = parse_topic(topic)
        with self._cache_lock:
            cache = self.caches.get(topic)
            if cache is None:
                raise UnknownSensor(str(topic))
            return cache.average(window_ns)

    def cache_entries(self, topic) -> list:
        topic = parse_topic(topic)
        with self._cache_lock:
            cache = self.caches.get(topic)
            if cache is None:
                raise UnknownSensor(str(topic))
            return list(cache.entries)

    def sensors(self) -> list:
        with self._cache_lock:
            return sorted(self.caches, key=str)

    # -- REST
    def handle(self, method, path, query):
        if method == "GET" and path == "/version":
            return 200, f"shv-pusher {__version__}\n"
        if method == "GET" and path == "/plugins":
            with self._control_lock:
                body = "".join(f"{h.name} {'running' if h.running else 'stopped'}\n" for h in self.hosts.values())
            return 200, body
        if method == "POST" and path.startswith("/plugins/"):
            name = path[len("/plugins/"):]
            action = query.get("action")
            if action not in ("start", "stop", "reload"):
                return 400, "action must be start, stop or reload\n"
            try:
                return 200, self.plugin_control(name, action) + "\n"
            except UnknownPlugin:
                return 404, f"unknown plugin {name}\n"
            except ReloadFailed as exc:
                return 503, f"{exc}\n"
        if method == "GET" and path == "/sensors":
            return 200, "".join(f"{t}\n" for t in self.sensors())
        if method == "GET" and path in ("/sensors/cache", "/sensors/avg"):
            try:
                topic = parse_topic(query.get("topic", ""))
            except MalformedTopic:
                return 400, "missing or malformed topic\n"
            try:
                if path == "/sensors/cache":
                    rows = "".join(f"{topic},{ts},{v}\n" for ts, v in self.cache_entries(topic))
                    return 200, "sensor,timestamp,value\n" + rows
                try:
                    window_ms = float(query.get("window", self.config.cache_window_ns / NS_PER_MS))
                except ValueError:
                    return 400, "window must be a number of milliseconds\n"
                if window_ms < 0:
                    return 400, "window must be >= 0\n"
                return 200, repr(self.cache_average(topic, int(window_ms * NS_PER_MS))) + "\n"
            except UnknownSensor:
                return 404, f"unknown sensor {topic}\n"
            except EmptyWindow as exc:
                return 404, f"{exc}\n"
        return 404, "not found\n"

    # -- real-time daemon
    def start(self):
        """Run sampling, sending and REST in background threads."""
        self._stop.clear()
        self._pool = ThreadPoolExecutor(self.config.threads, thread_name_prefix="sampler")
        for target, name in ((self._sample_loop, "scheduler"), (self._send_loop, "sender")):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        if self.config.rest_address:
            host, port = split_address(self.config.rest_address, 8000)
            self.rest = RestServer(self.handle, host, port).start()
        return self

    def _sample_loop(self):
        while not self._stop.is_set():
            t = self._next_sample_time()
            if t is None:
                self._stop.wait(0.05)
                continue
            self.clock.sleep_until(t, self._stop)
            if self._stop.is_set():
                break
            if self.clock.now_ns() < t:
                continue
            due = [(h, st) for h, st in self._due_groups(t)]
            futures = [self._pool.submit(self._run_group, h, st, st.next_tick) for h, st in due]
            for f in futures:
                f.result()

    def _send_loop(self):
        while not self._stop.is_set():
            self.clock.sleep_until(self.next_send, self._stop)
            if self._stop.is_set():
                break
            now = self.clock.now_ns()
            if now < self.next_send:
                continue
            self.flush(now)
            self.next_send = self._next_send_after(now)

    def stop(self, final_flush=True):
        self._stop.set()
        for t in self._threads:
            t.join()
        self._threads = []
        if self._pool:
            self._pool.shutdown(wait=True)
            self._pool = None
        if self.rest:
            self.rest.stop()
            self.rest = None
        if final_flush:
            self.flush()
        self.transport.close()
