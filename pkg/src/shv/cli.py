"""Command-line tools.

``shv-config``, ``shv-query`` and ``shv-csvimport`` work on a store
directory given by ``--store`` or ``$SHV_STORE``.  ``shv-pusher`` and
``shv-agent`` run the daemons from a config file; ``shv-bench`` drives
the measurement harness.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Data goes to
stdout and diagnostics to stderr, never the other way round.
"""

from __future__ import annotations

import argparse
import calendar
import logging
import os
import re
import signal
import sys
import threading

from . import __version__
from .errors import ConfigError, ShvError

log = logging.getLogger("shv")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

_RFC3339 = re.compile(
    r"(\d{4})-(\d\d)-(\d\d)[Tt ](\d\d):(\d\d):(\d\d)(?:\.(\d{1,9}))?([Zz]|[+-]\d\d:\d\d)?$")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_timestamp(text: str) -> int:
    """Integer nanoseconds since the epoch, or an RFC 3339 date-time."""
    text = text.strip()
    if "-" not in text:
        try:
            return int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a timestamp: {text!r}") from None
    m = _RFC3339.match(text)
    if not m:
        raise argparse.ArgumentTypeError(f"not an RFC 3339 timestamp: {text!r}")
    y, mo, d, h, mi, s, frac, tz = m.groups()
    try:
        secs = calendar.timegm((int(y), int(mo), int(d), int(h), int(mi), int(s), 0, 0, 0))
    except (ValueError, OverflowError):
        raise argparse.ArgumentTypeError(f"not an RFC 3339 timestamp: {text!r}") from None
    if not (1 <= int(mo) <= 12 and 1 <= int(d) <= calendar.monthrange(int(y), int(mo))[1]
            and int(h) < 24 and int(mi) < 60 and int(s) < 61):
        raise argparse.ArgumentTypeError(f"not an RFC 3339 timestamp: {text!r}")
    if tz and tz not in "Zz":
        sign = 1 if tz[0] == "+" else -1
        secs -= sign * (int(tz[1:3]) * 3600 + int(tz[4:6]) * 60)
    ns = int((frac or "").ljust(9, "0"))
    return secs * 1_000_000_000 + ns


def _duration_ms(text):
    from .metadata import ms_to_ns

    try:
        return ms_to_ns(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _format_value(v):
    if isinstance(v, float):
        return format(v, ".15g")
    return str(v)


def _open_store(args, create=False):
    from .storage import Store

    root = args.store or os.environ.get("SHV_STORE")
    if not root:
        raise UsageError("no store given (use --store or set SHV_STORE)")
    if not create and not os.path.isdir(root):
        raise ShvError(f"no store at {root}")
    return Store.open(root)


def _add_store(p, leaf=False):
    p.add_argument("--store", default=argparse.SUPPRESS if leaf else None,
                   help="storage root (default: $SHV_STORE)")


def _run(parser, argv, out, err):
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_usage(err)
        err.write(f"{parser.prog}: error: a command is required\n")
        return EXIT_USAGE
    try:
        return args.func(args, out) or EXIT_OK
    except UsageError as exc:
        parser.print_usage(err)
        err.write(f"{parser.prog}: error: {exc}\n")
        return EXIT_USAGE
    except (ShvError, ValueError, OSError) as exc:
        err.write(f"{parser.prog}: error: {exc}\n")
        return EXIT_RUNTIME


# -- shv-config ------------------------------------------------------------------


def _sensor_set(args, out):
    from .model import SensorMetadata

    store = _open_store(args, create=True)
    current = store.metadata.get(args.topic)
    if current is not None and not isinstance(current, SensorMetadata):
        raise ShvError(f"{args.topic} is a virtual sensor")
    current = current or SensorMetadata(args.topic)
    entry = SensorMetadata(
        args.topic,
        unit=args.unit if args.unit is not None else current.unit,
        scale=args.scale if args.scale is not None else current.scale,
        interval_ns=args.interval if args.interval is not None else current.interval_ns,
        ttl_ns=args.ttl if args.ttl is not None else current.ttl_ns,
    )
    store.metadata.put(entry)


def _sensor_show(args, out):
    from .metadata import MetadataStore
    from .model import SensorMetadata

    store = _open_store(args)
    if args.topic:
        entry = store.metadata.get(args.topic)
        if not isinstance(entry, SensorMetadata):
            raise ShvError(f"no metadata for sensor {args.topic}")
        entries = [entry]
    else:
        entries = store.metadata.sensors()
    view = MetadataStore()
    for e in entries:
        view._entries[e.topic] = e
    out.write(view.dumps())


def _vsensor_define(args, out):
    from .vsensor import VSensorDef, define

    store = _open_store(args, create=True)
    vdef = VSensorDef(args.topic, args.expr, unit=args.unit, interval_ns=args.interval,
                      t_zero_ns=args.tzero, scale=args.scale)
    existing = store.metadata.get(vdef.topic)
    if existing is not None and not isinstance(existing, VSensorDef):
        raise ShvError(f"{vdef.topic} is a physical sensor")
    define(vdef, store.metadata, known=lambda t: store.sid_of(t) is not None)


def _vsensor_list(args, out):
    from .metadata import MetadataStore

    store = _open_store(args)
    view = MetadataStore()
    for e in store.metadata.vsensors():
        view._entries[e.topic] = e
    out.write(view.dumps())


def _db_deleteold(args, out):
    store = _open_store(args)
    n = store.delete_before(args.ts)
    store.flush(durable=True)
    out.write(f"{n}\n")


def _db_compact(args, out):
    store = _open_store(args)
    store.compact()
    store.flush(durable=True)


def _db_applyttl(args, out):
    store = _open_store(args)
    total = 0
    for meta in store.metadata.sensors():
        if meta.ttl_ns <= 0:
            continue
        sid = store.sid_of(meta.topic)
        if sid is not None:
            total += store.delete_before(args.now - meta.ttl_ns, sids=[sid])
    store.flush(durable=True)
    out.write(f"{total}\n")


def config_parser():
    p = Parser(prog="shv-config", description="Manage sensor metadata, virtual sensors and storage.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_store(p)
    sub = p.add_subparsers(metavar="{sensor,vsensor,db}")

    sensor = sub.add_parser("sensor", help="physical sensor metadata").add_subparsers(metavar="{set,show}")
    s = sensor.add_parser("set", help="create or update a sensor's metadata")
    _add_store(s, leaf=True)
    s.add_argument("topic")
    s.add_argument("--unit")
    s.add_argument("--scale", type=float)
    s.add_argument("--interval", type=_duration_ms, help="sampling interval in ms")
    s.add_argument("--ttl", type=_duration_ms, help="retention in ms, 0 keeps forever")
    s.set_defaults(func=_sensor_set)
    s = sensor.add_parser("show", help="print sensor metadata")
    _add_store(s, leaf=True)
    s.add_argument("topic", nargs="?")
    s.set_defaults(func=_sensor_show)

    vs = sub.add_parser("vsensor", help="virtual sensors").add_subparsers(metavar="{define,list}")
    s = vs.add_parser("define", help="define or redefine a virtual sensor")
    _add_store(s, leaf=True)
    s.add_argument("topic")
    s.add_argument("expr")
    s.add_argument("unit")
    s.add_argument("interval", type=_duration_ms, help="grid interval in ms")
    s.add_argument("--scale", type=float, default=1.0)
    s.add_argument("--tzero", type=_duration_ms, default=0, help="grid origin in ms")
    s.set_defaults(func=_vsensor_define)
    s = vs.add_parser("list", help="print every virtual sensor definition")
    _add_store(s, leaf=True)
    s.set_defaults(func=_vsensor_list)

    db = sub.add_parser("db", help="retention and maintenance").add_subparsers(metavar="{deleteold,compact,applyttl}")
    s = db.add_parser("deleteold", help="delete readings older than a timestamp")
    _add_store(s, leaf=True)
    s.add_argument("ts", type=parse_timestamp)
    s.set_defaults(func=_db_deleteold)
    s = db.add_parser("compact", help="rewrite segments, dropping deleted readings")
    _add_store(s, leaf=True)
    s.set_defaults(func=_db_compact)
    s = db.add_parser("applyttl", help="apply every sensor's ttl relative to a timestamp")
    _add_store(s, leaf=True)
    s.add_argument("now", type=parse_timestamp)
    s.set_defaults(func=_db_applyttl)
    return p


# -- shv-query -------------------------------------------------------------------


def _query(args, out):
    from .querylib import QueryClient, csv_export, derivative, integral

    if args.t1 < args.t0:
        raise UsageError("t1 must not be before t0")
    store = _open_store(args)
    result = QueryClient(store).fetch(args.topic, args.t0, args.t1, raw=args.raw)
    # keep virtual sensor results computed by this query
    store.flush()
    if args.integral:
        value, unit = integral(result)
        out.write(f"{_format_value(value)} {unit}".rstrip() + "\n")
        return
    if args.derivative:
        result = derivative(result)
    if args.csv:
        out.write(csv_export(result))
        return
    for ts, v in result.points:
        out.write(f"{ts} {_format_value(v)}\n")


def query_parser():
    p = Parser(prog="shv-query", description="Read sensor data from a store.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_store(p)
    p.add_argument("topic")
    p.add_argument("t0", type=parse_timestamp, help="start (ns or RFC 3339), inclusive")
    p.add_argument("t1", type=parse_timestamp, help="end (ns or RFC 3339), exclusive")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--raw", action="store_true", help="unscaled stored integers")
    mode.add_argument("--integral", action="store_true", help="trapezoidal integral over time")
    mode.add_argument("--derivative", action="store_true", help="per-second finite differences")
    p.add_argument("--csv", action="store_true", help="CSV output")
    p.set_defaults(func=_query)
    return p


# -- shv-csvimport ---------------------------------------------------------------


def _csvimport(args, out):
    from .querylib import csv_import

    if args.file == "-":
        text = sys.stdin.read()
    else:
        with open(args.file, encoding="utf-8", newline="") as fh:
            text = fh.read()
    store = _open_store(args, create=True)
    n = csv_import(text, store)
    store.flush(durable=True)
    out.write(f"{n}\n")


def csvimport_parser():
    p = Parser(prog="shv-csvimport", description="Import raw readings from CSV.")
    _add_store(p)
    p.add_argument("file", help="CSV file with header sensor,timestamp,value ('-' for stdin)")
    p.set_defaults(func=_csvimport)
    return p


# -- daemons ---------------------------------------------------------------------


def _wait_for_signal():
    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    while not done.wait(1.0):
        pass


def _pusher(args, out):
    from .pusher import Pusher, PusherConfig

    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    pusher = Pusher(PusherConfig.from_file(args.config)).start()
    log.info("pusher %s running", pusher.config.client_id)
    _wait_for_signal()
    pusher.stop()


def _agent(args, out):
    from . import collectagent

    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    daemon = collectagent.run(collectagent.AgentConfig.from_file(args.config))
    log.info("collect agent listening on port %d", daemon.mqtt.port)
    _wait_for_signal()
    daemon.stop()


def _daemon_parser(prog, func, what):
    p = Parser(prog=prog, description=f"Run a {what}.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", required=True, help="configuration file")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=func)
    return p


# -- shv-bench -------------------------------------------------------------------


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from None


def _bench_sweep(args, out):
    from . import bench

    cfg = bench.SweepConfig.grid(args.sensors, args.intervals, args.pushers,
                                 duration_s=args.duration, warmup=args.warmup)
    out.write(bench.report_csv(bench.run_sweep(cfg)))


def _bench_predict(args, out):
    from . import bench

    m = bench.ScalingModel(args.a, args.load_a, args.b, args.load_b)
    out.write(f"{_format_value(m.predict(args.s))}\n")


def _bench_fit(args, out):
    import csv

    from . import bench

    with open(args.file, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        points = [(float(r[0]), float(r[1])) for r in rows if r[0] != "rate"]
    except (ValueError, IndexError):
        raise ShvError(f"{args.file}: expected rows of rate,load") from None
    f = bench.fit(points)
    out.write(f"slope {_format_value(f.slope)}\nintercept {_format_value(f.intercept)}\nr2 {_format_value(f.r2)}\n")


def _bench_overhead(args, out):
    from . import bench

    out.write(f"{_format_value(bench.overhead(bench.OverheadSample(args.T_r, args.T_p)))}\n")


def bench_parser():
    p = Parser(prog="shv-bench", description="Measurement harness and load model.")
    sub = p.add_subparsers(metavar="{sweep,predict,fit,overhead}")
    s = sub.add_parser("sweep", help="run tester pushers against a local agent; prints a CSV report")
    s.add_argument("--sensors", type=_int_list, default=[100])
    s.add_argument("--intervals", type=_int_list, default=[1000], help="sampling intervals in ms")
    s.add_argument("--pushers", type=_int_list, default=[1])
    s.add_argument("--duration", type=float, default=30.0, help="seconds per cell")
    s.add_argument("--warmup", type=float, default=0.1, help="fraction of each run not measured")
    s.set_defaults(func=_bench_sweep)
    s = sub.add_parser("predict", help="CPU load at rate s from two calibration points")
    for name in ("a", "load_a", "b", "load_b", "s"):
        s.add_argument(name, type=float)
    s.set_defaults(func=_bench_predict)
    s = sub.add_parser("fit", help="least-squares line through rate,load rows of a CSV file")
    s.add_argument("file")
    s.set_defaults(func=_bench_fit)
    s = sub.add_parser("overhead", help="relative overhead of a run with pusher")
    s.add_argument("T_r", type=float)
    s.add_argument("T_p", type=float)
    s.set_defaults(func=_bench_overhead)
    return p


# -- entry points ----------------------------------------------------------------

PARSERS = {
    "config": config_parser,
    "query": query_parser,
    "csvimport": csvimport_parser,
    "pusher": lambda: _daemon_parser("shv-pusher", _pusher, "pusher"),
    "agent": lambda: _daemon_parser("shv-agent", _agent, "collect agent"),
    "bench": bench_parser,
}


def dispatch(argv, out=None, err=None) -> int:
    """Run ``shv <tool> ...``; returns the exit code."""
    out = out or sys.stdout
    err = err or sys.stderr
    if not argv or argv[0] not in PARSERS:
        err.write(f"usage: shv {{{','.join(PARSERS)}}} ...\n")
        return EXIT_USAGE
    return run_tool(argv[0], argv[1:], out, err)


def run_tool(tool, argv, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = PARSERS[tool]()
    old = sys.stdout, sys.stderr
    # argparse writes help and usage to the process streams
    sys.stdout, sys.stderr = out, err
    try:
        return _run(parser, argv, out, err)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    finally:
        sys.stdout, sys.stderr = old


def _entry(tool):
    def main(argv=None):
        logging.basicConfig(level=logging.INFO if tool in ("pusher", "agent") else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        sys.exit(run_tool(tool, sys.argv[1:] if argv is None else argv))
    main.__name__ = f"{tool}_main"
    return main


config_main = _entry("config")
query_main = _entry("query")
csvimport_main = _entry("csvimport")
pusher_main = _entry("pusher")
agent_main = _entry("agent")
bench_main = _entry("bench")


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    sys.exit(dispatch(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
