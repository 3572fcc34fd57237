"""Publish-only MQTT broker that feeds the store.

The agent accepts pusher sessions, turns each PUBLISH topic into a SID,
decodes the reading records and hands them to the store in batches.  A
per-SID cache of recent readings backs the REST API.

Malformed application data (bad topic, payload not a multiple of 16
bytes) drops that one message; framing errors and anything outside the
publish-only subset close the session.
"""

from __future__ import annotations

import asyncio
import logging
import queue
import threading
import time
from dataclasses import dataclass

from . import __version__, ptree, wire
from .clock import NS_PER_MS, NS_PER_S, RealClock
from .errors import (
    BadLength,
    BindFailure,
    EmptyCache,
    EmptyWindow,
    MalformedTopic,
    ProtocolViolation,
    UnknownSensor,
)
from .model import parse_topic
from .pusher import SensorCache
from .rest import RestServer
from .storage import Store

log = logging.getLogger(__name__)

BATCH_READINGS = 1000
BATCH_INTERVAL_S = 0.1
STORE_FLUSH_S = 1.0


class Session:
    """Sans-IO session state machine for one client connection."""

    def __init__(self, agent, peer=None):
        self.agent = agent
        self.peer = peer
        self.client_id = None
        self.keep_alive_s = 0
        self.connected = False
        self.closed = False
        self.close_reason = None
        self.last_activity = time.monotonic()
        self.packets = 0
        self.readings = 0
        self.violations = 0
        self._decoder = wire.StreamDecoder()

    def close(self, reason):
        if not self.closed:
            self.closed = True
            self.close_reason = reason
            self._decoder = wire.StreamDecoder()
            self.agent._session_closed(self, reason)

    def feed(self, data) -> bytes:
        """Consume bytes from the client; returns bytes to send back."""
        if self.closed:
            return b""
        self.last_activity = time.monotonic()
        try:
            packets = self._decoder.feed(data)
        except ProtocolViolation as exc:
            packets = None
            error = exc
        out = bytearray()
        for packet in packets or ():
            out += self._handle(packet)
            if self.closed:
                return bytes(out)
        if packets is None:
            self.agent.stats["protocol_violations"] += 1
            self.close(f"protocol violation: {error}")
        return bytes(out)

    def _handle(self, packet) -> bytes:
        self.packets += 1
        if not self.connected:
            if isinstance(packet, wire.Connect):
                self.connected = True
                self.client_id = packet.client_id
                self.keep_alive_s = packet.keep_alive_s
                return wire.encode_packet(wire.ConnAck(0))
            self.agent.stats["protocol_violations"] += 1
            self.close("packet before CONNECT")
            return b""
        if isinstance(packet, wire.Publish):
            self.readings += self.agent.handle_publish(self, packet.topic, packet.payload)
            return b""
        if isinstance(packet, wire.PingReq):
            return wire.encode_packet(wire.PingResp())
        if isinstance(packet, wire.Disconnect):
            self.close("disconnect")
            return b""
        self.agent.stats["protocol_violations"] += 1
        self.close(f"unexpected {type(packet).__name__}")
        return b""


class CollectAgent:
    def __init__(self, store: Store, cache_window_ns=120 * NS_PER_S, clock=None,
                 batch_readings=BATCH_READINGS):
        self.store = store
        self.cache_window_ns = cache_window_ns
        self.clock = clock or RealClock()
        self.batch_readings = batch_readings
        self.caches = {}
        self._sids = {}
        self.sessions = set()
        self.stats = dict.fromkeys(
            ("sessions_opened", "sessions_closed", "publishes", "readings_received",
             "readings_stored", "violations", "protocol_violations"), 0)
        self._lock = threading.Lock()
        self._pending = []
        self._pending_count = 0
        self._queue = None
        self._writer = None
        self._writer_stop = threading.Event()

    # -- sessions
    def open_session(self, peer=None) -> Session:
        s = Session(self, peer)
        with self._lock:
            self.sessions.add(s)
            self.stats["sessions_opened"] += 1
        return s

    def _session_closed(self, session, reason):
        with self._lock:
            self.sessions.discard(session)
            self.stats["sessions_closed"] += 1
        log.debug("session %s closed: %s", session.client_id, reason)

    def handle_publish(self, session, topic: str, payload: bytes) -> int:
        try:
            sid = self._sids.get(topic)
            if sid is None:
                sid = self.store.sid_of(parse_topic(topic), register=True)
                if len(self._sids) < 1_000_000:
                    self._sids[topic] = sid
            records = wire.decode_payload(payload)
        except (MalformedTopic, BadLength) as exc:
            session.violations += 1
            with self._lock:
                self.stats["violations"] += 1
            log.debug("dropping message from %s: %s", session.client_id, exc)
            return 0
        if not records:
            return 0
        if any(ts == 0 for ts, _ in records):
            session.violations += 1
            with self._lock:
                self.stats["violations"] += 1
            return 0
        with self._lock:
            cache = self.caches.get(sid)
            if cache is None:
                cache = self.caches[sid] = SensorCache(self.cache_window_ns)
            for ts, value in records:
                if not cache.entries or ts >= cache.entries[-1][0]:
                    cache.insert(ts, value)
            self.stats["publishes"] += 1
            self.stats["readings_received"] += len(records)
            self._pending.append((sid, records))
            self._pending_count += len(records)
            full = self._pending_count >= self.batch_readings
            if full:
                batch, self._pending, self._pending_count = self._pending, [], 0
        if full:
            self._submit(batch)
        return len(records)

    # -- storage path
    def _submit(self, batch):
        if self._queue is not None:
            # blocks the caller while the writer is behind: reads pause upstream
            self._queue.put(batch)
        else:
            self._commit(batch)

    def _commit(self, batch):
        n = 0
        for sid, records in batch:
            self.store.insert_many(sid, records)
            n += len(records)
        with self._lock:
            self.stats["readings_stored"] += n

    def _take_pending(self):
        with self._lock:
            batch, self._pending, self._pending_count = self._pending, [], 0
        return batch

    def flush(self):
        """Commit every received reading to the store and flush it."""
        batch = self._take_pending()
        if self._queue is not None:
            if batch:
                self._queue.put(batch)
            self._queue.join()
        elif batch:
            self._commit(batch)
        self.store.flush()

    def start_writer(self, maxsize=256):
        """Move storage writes onto a background thread with a bounded queue."""
        if self._writer is not None:
            return
        self._queue = queue.Queue(maxsize)
        self._writer_stop.clear()
        self._writer = threading.Thread(target=self._writer_loop, name="storage-writer", daemon=True)
        self._writer.start()

    def _writer_loop(self):
        last_batch = last_flush = time.monotonic()
        while True:
            try:
                batch = self._queue.get(timeout=BATCH_INTERVAL_S)
            except queue.Empty:
                batch = None
            if batch is not None:
                try:
                    self._commit(batch)
                finally:
                    self._queue.task_done()
            now = time.monotonic()
            if now - last_batch >= BATCH_INTERVAL_S:
                pending = self._take_pending()
                if pending:
                    self._commit(pending)
                last_batch = now
            if now - last_flush >= STORE_FLUSH_S:
                self.store.flush()
                last_flush = now
            if self._writer_stop.is_set() and self._queue.empty():
                break

    def stop_writer(self):
        if self._writer is None:
            return
        self.flush()
        self._writer_stop.set()
        self._writer.join()
        self._writer = None
        self._queue = None

    # -- cache queries
    def _cache(self, topic):
        sid = self.store.sid_of(parse_topic(topic))
        cache = self.caches.get(sid) if sid is not None else None
        if cache is None:
            raise UnknownSensor(str(topic))
        return cache

    def latest(self, topic):
        with self._lock:
            newest = self._cache(topic).newest()
        if newest is None or newest[0] < self.clock.now_ns() - self.cache_window_ns:
            raise EmptyCache(f"no reading of {topic} in the last {self.cache_window_ns // NS_PER_MS} ms")
        return newest

    def average(self, topic, window_ns):
        with self._lock:
            cache = self._cache(topic)
            newest = cache.newest()
            if newest is None or newest[0] < self.clock.now_ns() - self.cache_window_ns:
                raise EmptyWindow("cache expired")
            return cache.average(window_ns)

    def sensors(self) -> list:
        with self._lock:
            sids = list(self.caches)
        return sorted(str(self.store.topic_of(s)) for s in sids)

    # -- REST
    def handle(self, method, path, query):
        if method != "GET":
            return 404, "not found\n"
        if path == "/version":
            return 200, f"shv-agent {__version__}\n"
        if path == "/sensors":
            return 200, "".join(f"{t}\n" for t in self.sensors())
        if path == "/stats":
            with self._lock:
                stats = dict(self.stats, sessions_active=len(self.sessions))
            return 200, "".join(f"{k} {v}\n" for k, v in sorted(stats.items()))
        if path in ("/sensors/latest", "/sensors/avg"):
            try:
                topic = parse_topic(query.get("topic", ""))
            except MalformedTopic:
                return 400, "missing or malformed topic\n"
            try:
                if path == "/sensors/latest":
                    ts, value = self.latest(topic)
                    return 200, f"{ts} {value}\n"
                try:
                    window_ms = float(query.get("window", self.cache_window_ns / NS_PER_MS))
                except ValueError:
                    return 400, "window must be a number of milliseconds\n"
                if window_ms < 0:
                    return 400, "window must be >= 0\n"
                return 200, repr(self.average(topic, int(window_ms * NS_PER_MS))) + "\n"
            except UnknownSensor:
                return 404, f"unknown sensor {topic}\n"
            except (EmptyCache, EmptyWindow) as exc:
                return 404, f"{exc}\n"
        return 404, "not found\n"


# -- network server ------------------------------------------------------------------


class MqttServer:
    """asyncio TCP front-end running one :class:`Session` per connection."""

    def __init__(self, agent: CollectAgent, host="127.0.0.1", port=wire.DEFAULT_PORT):
        self.agent = agent
        self.host = host
        self.requested_port = port
        self.port = None
        self._loop = None
        self._server = None
        self._thread = None
        self._writers = set()

    def start(self):
        ready = threading.Event()
        error = []

        def run():
            loop = asyncio.new_event_loop()
            self._loop = loop
            asyncio.set_event_loop(loop)
            try:
                self._server = loop.run_until_complete(
                    asyncio.start_server(self._serve, self.host, self.requested_port, reuse_address=True))
            except OSError as exc:
                error.append(exc)
                ready.set()
                loop.close()
                return
            self.port = self._server.sockets[0].getsockname()[1]
            ready.set()
            loop.run_forever()
            loop.close()

        self._thread = threading.Thread(target=run, name="mqtt", daemon=True)
        self._thread.start()
        ready.wait()
        if error:
            self._thread.join()
            raise BindFailure(f"cannot bind MQTT port {self.host}:{self.requested_port}: {error[0]}")
        return self

    async def _serve(self, reader, writer):
        session = self.agent.open_session(writer.get_extra_info("peername"))
        self._writers.add(writer)
        try:
            while not session.closed:
                timeout = 1.5 * session.keep_alive_s if session.keep_alive_s else None
                try:
                    data = await asyncio.wait_for(reader.read(65536), timeout)
                except asyncio.TimeoutError:
                    session.close("keep-alive expired")
                    break
                if not data:
                    session.close("connection lost")
                    break
                reply = session.feed(data)
                if reply:
                    writer.write(reply)
                    await writer.drain()
        except (ConnectionError, OSError):
            session.close("connection error")
        finally:
            self._writers.discard(writer)
            writer.close()

    def stop(self):
        if self._loop is None:
            return

        async def shutdown():
            self._server.close()
            for w in list(self._writers):
                w.close()
            await self._server.wait_closed()
            await asyncio.sleep(0)

        fut = asyncio.run_coroutine_threadsafe(shutdown(), self._loop)
        try:
            fut.result(timeout=5)
        except Exception:  # shutting down anyway
            log.exception("error while closing MQTT server")
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join()
        self._loop = None


@dataclass
class AgentConfig:
    mqtt_host: str = "127.0.0.1"
    mqtt_port: int = wire.DEFAULT_PORT
    rest_host: str = "127.0.0.1"
    rest_port: int = 8080
    cache_window_ns: int = 120 * NS_PER_S
    store_path: str = "./data"
    nodes: int = 1
    partition_level: int = 0

    @classmethod
    def from_tree(cls, root) -> AgentConfig:
        g = root.child("global") or ptree.Node("global")
        s = root.child("storage") or ptree.Node("storage")
        return cls(
            mqtt_host=g.get("mqttHost", "127.0.0.1"),
            mqtt_port=g.get_int("mqttPort", wire.DEFAULT_PORT),
            rest_host=g.get("restHost", "127.0.0.1"),
            rest_port=g.get_int("restPort", 8080),
            cache_window_ns=int(g.get_float("cacheWindow", 120_000) * NS_PER_MS),
            store_path=s.get("path", "./data"),
            nodes=s.get_int("nodes", 1),
            partition_level=s.get_int("partitionLevel", 0),
        )

    @classmethod
    def from_file(cls, path) -> AgentConfig:
        return cls.from_tree(ptree.load(path))


class AgentDaemon:
    """A running collect agent: MQTT server, REST server and storage writer."""

    def __init__(self, agent, mqtt, rest):
        self.agent = agent
        self.mqtt = mqtt
        self.rest = rest

    def stop(self):
        self.mqtt.stop()
        if self.rest:
            self.rest.stop()
        self.agent.stop_writer()
        self.agent.flush()


def run(config: AgentConfig, store=None, rest=True) -> AgentDaemon:
    """Start a collect agent; returns once it is listening."""
    store = store or Store.open(config.store_path, config.nodes, config.partition_level)
    agent = CollectAgent(store, config.cache_window_ns)
    agent.start_writer()
    try:
        mqtt = MqttServer(agent, config.mqtt_host, config.mqtt_port).start()
    except BindFailure:
        agent.stop_writer()
        raise
    rest_server = None
    if rest:
        try:
            rest_server = RestServer(agent.handle, config.rest_host, config.rest_port).start()
        except BindFailure:
            mqtt.stop()
            agent.stop_writer()
            raise
    return AgentDaemon(agent, mqtt, rest_server)
