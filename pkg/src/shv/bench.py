"""Measurement harness.

Runs fleets of tester pushers as separate processes against an
in-process collect agent and reports ingest rate, loss and CPU load per
configuration.  Also holds the arithmetic used to read those numbers:
the relative overhead metric, least-squares line fitting and the
two-point linear model for predicting pusher CPU load at a sensor rate.

CPU load is process CPU time divided by wall time over the measured part
of a run; the first ``warmup`` fraction of every run is excluded.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import multiprocessing
import queue
import resource
import shutil
import tempfile
import time
import traceback
from dataclasses import dataclass, field

from .errors import DegenerateInput, HarnessFailure

REPORT_HEADER = ["pushers", "sensors", "interval_ms", "offered_rps", "stored_rps", "loss",
                 "pusher_cpu", "agent_cpu", "pusher_rss_mb"]


@dataclass(frozen=True)
class OverheadSample:
    T_r: float
    T_p: float

    def __post_init__(self):
        if not self.T_r > 0:
            raise ValueError("reference runtime must be positive")


def overhead(s: OverheadSample) -> float:
    """Relative slowdown of a workload while a pusher runs; may be negative."""
    return (s.T_p - s.T_r) / s.T_r


def reported_overhead(s: OverheadSample) -> float:
    """Overhead as shown in reports, where a faster run counts as no overhead."""
    return max(0.0, overhead(s))


@dataclass(frozen=True)
class ScalingModel:
    """Linear CPU-load model through two calibration points ``(rate, load)``."""

    a: float
    load_a: float
    b: float
    load_b: float

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("calibration rates must differ")

    def predict(self, s: float) -> float:
        return self.load_a + (s - self.a) * (self.load_b - self.load_a) / (self.b - self.a)


def predict(m: ScalingModel, s: float) -> float:
    return m.predict(s)


@dataclass(frozen=True)
class Fit:
    slope: float
    intercept: float
    r2: float

    def __iter__(self):
        return iter((self.slope, self.intercept, self.r2))


def fit(points) -> Fit:
    """Ordinary least squares over ``(x, y)`` points."""
    points = [(float(x), float(y)) for x, y in points]
    if len({x for x, _ in points}) < 2:
        raise DegenerateInput("need at least two distinct rates")
    n = len(points)
    mx = math.fsum(x for x, _ in points) / n
    my = math.fsum(y for _, y in points) / n
    sxx = math.fsum((x - mx) ** 2 for x, _ in points)
    sxy = math.fsum((x - mx) * (y - my) for x, y in points)
    slope = sxy / sxx
    intercept = my - slope * mx
    ss_tot = math.fsum((y - my) ** 2 for _, y in points)
    ss_res = math.fsum((y - (intercept + slope * x)) ** 2 for x, y in points)
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return Fit(slope, intercept, r2)


# -- sweeps ----------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    pushers: int
    sensors: int
    interval_ms: int

    @property
    def rate(self) -> float:
        """Readings per second offered by the whole cell."""
        return self.pushers * self.sensors * 1000 / self.interval_ms


@dataclass
class SweepConfig:
    cells: list
    duration_s: float = 30.0
    warmup: float = 0.1
    send_interval_ms: int = 1000

    def __post_init__(self):
        self.cells = [c if isinstance(c, Cell) else Cell(*c) for c in self.cells]
        if not self.cells:
            raise ValueError("empty sweep grid")
        if not 0 <= self.warmup < 1:
            raise ValueError("warmup is a fraction of the run")
        for c in self.cells:
            if c.pushers < 1 or c.sensors < 1 or c.interval_ms < 1:
                raise ValueError(f"bad cell {c}")

    @classmethod
    def grid(cls, sensors, intervals_ms, pushers=(1,), **kw) -> SweepConfig:
        cells = [Cell(p, s, i) for p, s, i in itertools.product(pushers, sensors, intervals_ms)]
        return cls(cells, **kw)


@dataclass
class CellResult:
    cell: Cell
    duration_s: float
    offered: int
    published: int
    stored: int
    pusher_cpu: float
    agent_cpu: float
    pusher_rss_mb: float
    workers: list = field(default_factory=list)

    @property
    def dropped_at_pusher(self) -> int:
        return self.offered - self.published

    @property
    def dropped_at_agent(self) -> int:
        return self.published - self.stored

    @property
    def loss(self) -> float:
        return 1.0 - self.stored / self.offered if self.offered else 0.0

    def row(self) -> list:
        c = self.cell
        return [c.pushers, c.sensors, c.interval_ms,
                f"{self.offered / self.duration_s:.6g}", f"{self.stored / self.duration_s:.6g}",
                f"{self.loss:.6g}", f"{self.pusher_cpu:.6g}", f"{self.agent_cpu:.6g}",
                f"{self.pusher_rss_mb:.6g}"]


def report_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in results:
        w.writerow(r.row())
    return buf.getvalue()


def _pusher_worker(job, results):
    """Child process: run one tester pusher for ``job['duration_s']``."""
    try:
        from . import ptree
        from .model import parse_topic
        from .pusher import PluginConfig, Pusher, PusherConfig

        block = ptree.loads(f"group g {{ interval {job['interval_ms']}; sensors {job['sensors']} }}")
        cfg = PusherConfig(
            broker=job["broker"],
            client_id=job["client_id"],
            mqtt_prefix=parse_topic(job["prefix"]),
            send_interval_ns=job["send_interval_ms"] * 1_000_000,
            plugins=[PluginConfig("tester", "tester", block=block)],
        )
        pusher = Pusher(cfg)
        job["start_event"].wait()
        start = time.monotonic()
        pusher.start()
        time.sleep(job["duration_s"] * job["warmup"])
        cpu0, wall0 = time.process_time(), time.monotonic()
        time.sleep(max(0.0, start + job["duration_s"] - time.monotonic()))
        cpu1, wall1 = time.process_time(), time.monotonic()
        pusher.stop(final_flush=True)
        rss_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
        results.put({
            "client_id": job["client_id"],
            "offered": pusher.stats["sampled"],
            "published": pusher.stats["published"],
            "dropped": pusher.stats["dropped"],
            "cpu": (cpu1 - cpu0) / (wall1 - wall0) if wall1 > wall0 else 0.0,
            "rss_mb": rss_kb / 1024,
        })
    except BaseException:
        results.put({"client_id": job.get("client_id"), "error": traceback.format_exc()})


def _wait_for_ingest(agent, expected, timeout_s=30.0):
    """Wait until the agent has seen ``expected`` readings or stops making progress."""
    deadline = time.monotonic() + timeout_s
    last, still_since = -1, time.monotonic()
    while time.monotonic() < deadline:
        seen = agent.stats["readings_received"]
        if seen >= expected:
            return
        if seen != last:
            last, still_since = seen, time.monotonic()
        elif time.monotonic() - still_since > 2.0:
            return
        time.sleep(0.05)


def run_cell(cell: Cell, cfg: SweepConfig, agent, broker, index=0) -> CellResult:
    ctx = multiprocessing.get_context("spawn")
    results = ctx.Queue()
    start_event = ctx.Event()
    procs = []
    for k in range(cell.pushers):
        job = {
            "broker": broker,
            "client_id": f"bench-{index}-{k}",
            "prefix": f"/bench/c{index}/p{k}",
            "sensors": cell.sensors,
            "interval_ms": cell.interval_ms,
            "send_interval_ms": cfg.send_interval_ms,
            "duration_s": cfg.duration_s,
            "warmup": cfg.warmup,
            "start_event": start_event,
        }
        p = ctx.Process(target=_pusher_worker, args=(job, results), daemon=True)
        p.start()
        procs.append(p)
    agent.flush()
    stored0 = agent.stats["readings_stored"]
    seen0 = agent.stats["readings_received"]
    # let every child finish importing before the clock starts
    time.sleep(0.5 + 0.2 * cell.pushers)
    start_event.set()
    t0 = time.monotonic()
    time.sleep(cfg.duration_s * cfg.warmup)
    cpu0, wall0 = time.process_time(), time.monotonic()
    time.sleep(max(0.0, t0 + cfg.duration_s - time.monotonic()))
    cpu1, wall1 = time.process_time(), time.monotonic()
    workers = []
    deadline = time.monotonic() + cfg.duration_s + 60
    try:
        while len(workers) < cell.pushers:
            workers.append(results.get(timeout=max(0.1, deadline - time.monotonic())))
    except queue.Empty:
        raise HarnessFailure(f"{cell}: only {len(workers)} of {cell.pushers} pushers reported") from None
    finally:
        for p in procs:
            p.join(timeout=10)
            if p.is_alive():
                p.kill()
    failed = [w for w in workers if "error" in w]
    if failed:
        raise HarnessFailure(f"pusher {failed[0]['client_id']} failed:\n{failed[0]['error']}")
    published = sum(w["published"] for w in workers)
    _wait_for_ingest(agent, seen0 + published)
    agent.flush()
    stored = agent.stats["readings_stored"] - stored0
    return CellResult(
        cell=cell,
        duration_s=cfg.duration_s,
        offered=sum(w["offered"] for w in workers),
        published=published,
        stored=stored,
        pusher_cpu=sum(w["cpu"] for w in workers) / len(workers),
        agent_cpu=(cpu1 - cpu0) / (wall1 - wall0),
        pusher_rss_mb=max(w["rss_mb"] for w in workers),
        workers=workers,
    )


class Harness:
    """A collect agent with a throwaway store, listening on a free port."""

    def __init__(self, root=None):
        from .collectagent import CollectAgent, MqttServer
        from .storage import Store

        self._tmp = None
        if root is None:
            root = self._tmp = tempfile.mkdtemp(prefix="shv-bench-")
        self.store = Store.open(root)
        self.agent = CollectAgent(self.store)
        self.agent.start_writer()
        try:
            self.mqtt = MqttServer(self.agent, "127.0.0.1", 0).start()
        except Exception as exc:
            self.agent.stop_writer()
            raise HarnessFailure(f"cannot start collect agent: {exc}") from exc
        self.broker = f"127.0.0.1:{self.mqtt.port}"

    def close(self):
        self.mqtt.stop()
        self.agent.stop_writer()
        self.store.close()
        if self._tmp:
            shutil.rmtree(self._tmp, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_sweep(cfg: SweepConfig, root=None) -> list:
    """Run every cell of ``cfg``; returns one :class:`CellResult` per cell."""
    with Harness(root) as h:
        return [run_cell(c, cfg, h.agent, h.broker, i) for i, c in enumerate(cfg.cells)]


def load_curve(rates, duration_s=10.0, interval_ms=100, warmup=0.1) -> list:
    """Pusher CPU load at each sensor rate, as ``(rate, load)`` points."""
    cells = []
    for r in rates:
        sensors = r * interval_ms / 1000
        if sensors != int(sensors) or sensors < 1:
            raise ValueError(f"rate {r}/s is not a whole number of sensors at {interval_ms} ms")
        cells.append(Cell(1, int(sensors), interval_ms))
    results = run_sweep(SweepConfig(cells, duration_s=duration_s, warmup=warmup))
    return [(c.rate, r.pusher_cpu) for c, r in zip(cells, results)]
